#pragma once

// Voxel-level dose mimicking: minimise a LossConfig directly over the dose voxels with Adam,
// plus the restart and midpoint-convexity studies built on it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/losses.hpp"
#include "dosekit/metrics.hpp"
#include "dosekit/parallel.hpp"
#include "dosekit/rng.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

struct OptimizerConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  int iterations = 2000;
  bool decay = true;    // constant for the first half, then linear decay to 0
  bool project = true;  // clamp variables to >= 0 after each step

  void validate() const {
    if (!(lr > 0.0)) throw Error(ErrorKind::Config, "lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw Error(ErrorKind::Config, "Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error(ErrorKind::Config, "eps must be positive");
    if (iterations < 1) throw Error(ErrorKind::Config, "iterations must be >= 1");
  }
};

/// Learning rate for 1-based `step` of `total`: base up to total/2, then base*(total-step)/(total/2).
inline double scheduled_lr(double base, int step, int total, bool decay = true) {
  if (!decay) return base;
  const double half = static_cast<double>(total) / 2.0;
  if (step <= half) return base;
  return base * std::max(0.0, static_cast<double>(total - step)) / half;
}

struct AdamState {
  std::vector<double> m, v;
  long step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update of `x` in place with learning rate `lr`.
template <typename T>
void adam_step(std::vector<T>& x, std::span<const double> grad, AdamState& state, double lr,
               const OptimizerConfig& cfg) {
  if (grad.size() != x.size() || state.m.size() != x.size())
    throw Error(ErrorKind::Config, "Adam state and gradient sizes differ from the variables");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw Error(ErrorKind::Numerical, "non-finite gradient at index " + std::to_string(i) + " (Adam step " +
                                            std::to_string(state.step + 1) + ")");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < x.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double update = lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.eps);
    double next = static_cast<double>(x[i]) - update;
    if (cfg.project && next < 0.0) next = 0.0;
    x[i] = static_cast<T>(next);
  }
}

// ---------------------------------------------------------------------------
// mimicking

enum class InitKind { Zeros, Uniform, Random };

struct InitSpec {
  InitKind kind = InitKind::Zeros;
  double value = 0.0;  // Gy, for Uniform
  std::uint64_t seed = 0;
  double random_max = 70.0;  // Gy, Random draws from [0, random_max)

  static InitSpec zeros() { return {}; }
  static InitSpec uniform(double u) { return {InitKind::Uniform, u, 0}; }
  static InitSpec random(std::uint64_t seed) { return {InitKind::Random, 0.0, seed}; }

  std::string describe() const {
    switch (kind) {
      case InitKind::Zeros: return "zeros";
      case InitKind::Uniform: {
        nlohmann::json v = value;
        return "uniform:" + v.dump();
      }
      case InitKind::Random: return "rand:" + std::to_string(seed);
    }
    return "zeros";
  }
};

/// Parses "zeros", "uniform:<Gy>" or "rand:<seed>".
inline InitSpec parse_init(const std::string& s) {
  try {
    if (s == "zeros") return InitSpec::zeros();
    if (s.rfind("uniform:", 0) == 0) return InitSpec::uniform(std::stod(s.substr(8)));
    if (s.rfind("rand:", 0) == 0) return InitSpec::random(std::stoull(s.substr(5)));
  } catch (const std::logic_error&) {
  }
  throw Error(ErrorKind::Config, "init must be zeros, uniform:<Gy> or rand:<seed>, got '" + s + "'");
}

inline Grid3 initial_dose(const GridGeometry& geometry, const InitSpec& init) {
  Grid3 d(geometry, Unit::Gy);
  if (init.kind == InitKind::Uniform) {
    if (!(init.value >= 0.0)) throw Error(ErrorKind::Config, "uniform init must be nonnegative");
    std::fill(d.values.begin(), d.values.end(), init.value);
  } else if (init.kind == InitKind::Random) {
    Rng rng(init.seed);
    for (double& v : d.values) v = rng.uniform(0.0, init.random_max);
  }
  return d;
}

struct TimingStats {
  double total_s = 0.0;
  double mean_iter_s = 0.0;
  double min_iter_s = 0.0;
  double max_iter_s = 0.0;
};

struct MimicResult {
  Grid3 dose;
  double initial_loss = 0.0;
  std::vector<double> loss;                           // after each update
  std::vector<std::map<std::string, double>> terms;  // unweighted, after each update
  TimingStats timing;                                 // loss+gradient+update per iteration
  int restart_id = 0;

  double final_loss() const { return loss.empty() ? initial_loss : loss.back(); }
};

struct MimicOptions {
  int divergence_window = 100;
  double divergence_factor = 10.0;
  std::function<void(int, double)> progress;  // (iteration, loss)
};

/// Adam over the dose voxels of `ref.dose` against `loss`, from `init`.
inline MimicResult mimic_dose(const CaseBundle& ref, const LossConfig& loss, const OptimizerConfig& opt,
                              const InitSpec& init, int restart_id = 0, const MimicOptions& options = {}) {
  loss.validate();
  opt.validate();
  ref.dose.validate();
  using clock = std::chrono::steady_clock;

  MimicResult result;
  result.restart_id = restart_id;
  result.dose = initial_dose(ref.dose.geometry, init);
  result.loss.reserve(static_cast<std::size_t>(opt.iterations));
  result.terms.reserve(static_cast<std::size_t>(opt.iterations));

  LossValueGrad current = total_loss_grad(result.dose, ref.dose, ref.structures, loss);
  result.initial_loss = current.value;
  const double limit = options.divergence_factor * std::max(current.value, 1e-12);
  AdamState state(result.dose.size());
  int above = 0;
  result.timing.min_iter_s = std::numeric_limits<double>::infinity();

  const auto start = clock::now();
  for (int it = 1; it <= opt.iterations; ++it) {
    const auto t0 = clock::now();
    adam_step(result.dose.values, current.grad.values, state, scheduled_lr(opt.lr, it, opt.iterations, opt.decay), opt);
    current = total_loss_grad(result.dose, ref.dose, ref.structures, loss);
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    result.timing.min_iter_s = std::min(result.timing.min_iter_s, dt);
    result.timing.max_iter_s = std::max(result.timing.max_iter_s, dt);

    if (!std::isfinite(current.value))
      throw Error(ErrorKind::Numerical, "loss is not finite at iteration " + std::to_string(it));
    above = current.value > limit ? above + 1 : 0;
    if (above >= options.divergence_window)
      throw Error(ErrorKind::Numerical, "diverged: loss above " + std::to_string(options.divergence_factor) +
                                            "x its initial value for " + std::to_string(above) +
                                            " iterations (iteration " + std::to_string(it) + ")");
    result.loss.push_back(current.value);
    result.terms.push_back(current.terms);
    if (options.progress) options.progress(it, current.value);
  }
  result.timing.total_s = std::chrono::duration<double>(clock::now() - start).count();
  result.timing.mean_iter_s = result.timing.total_s / opt.iterations;
  return result;
}

inline nlohmann::ordered_json to_json(const TimingStats& t) {
  return {{"total_s", t.total_s}, {"mean_iter_s", t.mean_iter_s}, {"min_iter_s", t.min_iter_s},
          {"max_iter_s", t.max_iter_s}};
}

/// Trajectory and final summary; wall-clock figures are left out so the document is reproducible.
inline nlohmann::ordered_json to_json(const MimicResult& r, const Grid3& ref_dose,
                                      const std::vector<StructureMask>& structures) {
  nlohmann::ordered_json j;
  j["restart_id"] = r.restart_id;
  j["initial_loss"] = r.initial_loss;
  j["final_loss"] = r.final_loss();
  j["dose_score"] = dose_score(r.dose, ref_dose);
  j["dvh_score"] = dvh_score(r.dose, ref_dose, structures).score;
  j["loss"] = r.loss;
  nlohmann::ordered_json terms = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < r.terms.size(); ++i)
    for (const auto& [k, v] : r.terms[i]) terms[k].push_back(v);
  j["terms"] = terms;
  return j;
}

// ---------------------------------------------------------------------------
// restart study

struct RestartReport {
  std::vector<MimicResult> runs;
  std::vector<double> final_losses;
  std::vector<double> final_dvh_scores;
  double loss_spread_mean = 0.0;  // pairwise |a - b|
  double loss_spread_max = 0.0;
  double dvh_spread_mean = 0.0;
  double dvh_spread_max = 0.0;
};

inline void pairwise_spread(const std::vector<double>& v, double& mean, double& max) {
  mean = max = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < v.size(); ++a)
    for (std::size_t b = a + 1; b < v.size(); ++b) {
      const double d = std::abs(v[a] - v[b]);
      mean += d;
      max = std::max(max, d);
      ++pairs;
    }
  if (pairs) mean /= static_cast<double>(pairs);
}

/// Runs mimic_dose from rand:<seed> for each seed. Restarts run in parallel.
inline RestartReport restart_study(const CaseBundle& ref, const LossConfig& loss, const OptimizerConfig& opt,
                                   const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw Error(ErrorKind::Config, "restart study needs at least two seeds");
  RestartReport report;
  report.runs.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    report.runs[i] = mimic_dose(ref, loss, opt, InitSpec::random(seeds[i]), static_cast<int>(i));
  });
  for (const auto& r : report.runs) {
    report.final_losses.push_back(r.final_loss());
    report.final_dvh_scores.push_back(dvh_score(r.dose, ref.dose, ref.structures).score);
  }
  pairwise_spread(report.final_losses, report.loss_spread_mean, report.loss_spread_max);
  pairwise_spread(report.final_dvh_scores, report.dvh_spread_mean, report.dvh_spread_max);
  return report;
}

inline nlohmann::ordered_json to_json(const RestartReport& r, const std::vector<std::uint64_t>& seeds) {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  j["final_losses"] = r.final_losses;
  j["final_dvh_scores"] = r.final_dvh_scores;
  j["loss_spread_mean"] = r.loss_spread_mean;
  j["loss_spread_max"] = r.loss_spread_max;
  j["dvh_spread_mean"] = r.dvh_spread_mean;
  j["dvh_spread_max"] = r.dvh_spread_max;
  j["trajectories"] = nlohmann::ordered_json::array();
  for (const auto& run : r.runs) j["trajectories"].push_back(run.loss);
  return j;
}

// ---------------------------------------------------------------------------
// convexity probe

using ScalarFn = std::function<double(const Grid3&)>;

struct ProbeResult {
  int pairs = 0;
  int violations = 0;
  double max_violation = 0.0;  // max of f(mid) - (f(x) + f(y)) / 2
};

inline void probe_pair(const ScalarFn& fn, const Grid3& x, const Grid3& y, ProbeResult& r, double tol = 1e-9) {
  Grid3 mid = x;
  for (std::size_t i = 0; i < mid.size(); ++i) mid.values[i] = 0.5 * (x.values[i] + y.values[i]);
  const double gap = fn(mid) - 0.5 * (fn(x) + fn(y));
  ++r.pairs;
  if (gap > tol) ++r.violations;
  r.max_violation = std::max(r.max_violation, gap);
}

/// Midpoint test f((x+y)/2) <= (f(x)+f(y))/2 + 1e-9 on seeded random doses in [0, max_dose).
inline ProbeResult midpoint_convexity_probe(const ScalarFn& fn, const GridGeometry& geometry, int n_pairs,
                                            std::uint64_t seed, double max_dose = 70.0) {
  Rng rng(seed);
  ProbeResult r;
  r.max_violation = -std::numeric_limits<double>::infinity();
  Grid3 x(geometry, Unit::Gy), y(geometry, Unit::Gy);
  for (int p = 0; p < n_pairs; ++p) {
    for (double& v : x.values) v = rng.uniform(0.0, max_dose);
    for (double& v : y.values) v = rng.uniform(0.0, max_dose);
    probe_pair(fn, x, y, r);
  }
  return r;
}

/// Pairs x = ref, y = ref + c for each shift c: the midpoint straddles the DVH thresholds
/// between the two, where the saturating sigmoid makes L_DVH concave along the segment.
inline ProbeResult threshold_straddle_probe(const ScalarFn& fn, const Grid3& ref, const std::vector<double>& shifts) {
  ProbeResult r;
  r.max_violation = -std::numeric_limits<double>::infinity();
  for (double c : shifts) {
    Grid3 y = ref;
    for (double& v : y.values) v += c;
    probe_pair(fn, ref, y, r);
  }
  return r;
}

inline nlohmann::ordered_json to_json(const ProbeResult& r) {
  return {{"pairs", r.pairs}, {"violations", r.violations}, {"max_violation", r.max_violation}};
}

// ---------------------------------------------------------------------------
// cost

/// Mean wall-clock seconds of one loss+gradient evaluation and Adam update over `reps` repetitions.
inline double iteration_cost(const CaseBundle& ref, const LossConfig& loss, int reps, std::uint64_t seed = 1) {
  if (reps < 1) throw Error(ErrorKind::Config, "reps must be >= 1");
  Grid3 dose = initial_dose(ref.dose.geometry, InitSpec::random(seed));
  OptimizerConfig opt;
  AdamState state(dose.size());
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) {
    const auto g = total_loss_grad(dose, ref.dose, ref.structures, loss);
    adam_step(dose.values, g.grad.values, state, opt.lr, opt);
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

}  // namespace dosekit
