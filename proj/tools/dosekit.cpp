#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dosekit/gradcheck.hpp"
#include "dosekit/manifest.hpp"
#include "dosekit/metrics.hpp"
#include "dosekit/mimic.hpp"
#include "dosekit/mvol.hpp"
#include "dosekit/parallel.hpp"
#include "dosekit/phantom.hpp"
#include "dosekit/preprocess.hpp"
#include "dosekit/report.hpp"
#include "dosekit/tinymodel.hpp"

namespace {

using namespace dosekit;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using clock_type = std::chrono::steady_clock;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool g_verbose = false;

void log(const std::string& msg) {
  if (g_verbose) std::cerr << msg << "\n";
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const ojson& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + p.string());
  out << j.dump(2) << "\n";
}

Index3 to_index3(const std::vector<int>& v, const char* flag) {
  if (v.size() != 3) throw UsageError(std::string(flag) + " takes three comma-separated integers");
  return {v[0], v[1], v[2]};
}

std::uint64_t env_seed(std::uint64_t fallback) {
  const char* s = std::getenv("DOSEKIT_SEED");
  if (!s || !*s) return fallback;
  try {
    return std::stoull(s);
  } catch (const std::logic_error&) {
    throw UsageError(std::string("DOSEKIT_SEED is not an unsigned integer: ") + s);
  }
}

LossConfig load_loss(const std::string& path) {
  return path.empty() ? LossConfig{} : loss_config_from_json(read_json(path));
}

OptimizerConfig load_opt(const std::string& path) {
  return path.empty() ? OptimizerConfig{} : optimizer_config_from_json(read_json(path));
}

/// Collects a RunManifest for one artifact-producing command.
class Recorder {
 public:
  Recorder(std::string command, const std::vector<std::string>& args) : start_(clock_type::now()) {
    m_.command = std::move(command);
    m_.argv = args;
    m_.cwd = fs::current_path().string();
    if (const char* s = std::getenv("DOSEKIT_SEED")) m_.env["DOSEKIT_SEED"] = s;
    m_.started = utc_timestamp();
  }

  RunManifest& manifest() { return m_; }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void finish(const fs::path& manifest_path) {
    m_.finished = utc_timestamp();
    m_.timing["wall_s"] = std::chrono::duration<double>(clock_type::now() - start_).count();
    for (const auto& p : outputs_) m_.outputs.push_back({p.string(), content_hash(p, {kRunManifestName})});
    save_run_manifest(manifest_path, m_);
    log("manifest: " + manifest_path.string());
  }

 private:
  RunManifest m_;
  clock_type::time_point start_;
  std::vector<fs::path> outputs_;
};

// ---------------------------------------------------------------------------

struct PhantomArgs {
  int n = 36;
  std::uint64_t seed = 17;
  std::vector<int> dims{32, 32, 32};
  double extent_mm = 256.0;
  std::string out;
  std::vector<int> split;
};

int cmd_phantom(const PhantomArgs& a, Recorder& rec) {
  PhantomSpec base;
  base.dims = to_index3(a.dims, "--dims");
  for (int i = 0; i < 3; ++i) base.spacing[i] = a.extent_mm / base.dims[i];
  std::optional<SplitCounts> split;
  if (!a.split.empty()) {
    if (a.split.size() != 3) throw UsageError("--split takes train,val,test");
    split = SplitCounts{a.split[0], a.split[1], a.split[2]};
  }
  const Manifest m = generate_dataset(a.n, a.seed, base, a.out, split);
  rec.manifest().seeds["seed"] = a.seed;
  rec.manifest().config = {{"n", a.n}, {"dims", base.dims}, {"spacing", base.spacing}, {"split", a.split}};
  rec.output(a.out);
  rec.finish(fs::path(a.out) / kRunManifestName);
  std::cout << "wrote " << m.cases.size() << " cases to " << a.out << "\n";
  return kOk;
}

struct PreprocessArgs {
  std::string in, out;
  std::vector<int> crop{300, 300, 128}, net{128, 128, 128};
  double rx = 60.0;
  std::vector<double> hu{-1024.0, 3071.0};
};

int cmd_preprocess(const PreprocessArgs& a, Recorder& rec) {
  PreprocessConfig cfg;
  cfg.crop_size = to_index3(a.crop, "--crop");
  cfg.net_dims = to_index3(a.net, "--net");
  cfg.prescription = a.rx;
  if (a.hu.size() != 2) throw UsageError("--hu-clip takes low,high");
  cfg.hu_low = a.hu[0];
  cfg.hu_high = a.hu[1];
  const CaseBundle out = prepare_case(load_case(a.in), cfg);
  save_case(a.out, out);
  rec.manifest().config = {{"crop", cfg.crop_size}, {"net", cfg.net_dims}, {"rx", cfg.prescription},
                           {"hu_clip", {cfg.hu_low, cfg.hu_high}}};
  rec.output(a.out);
  rec.finish(fs::path(a.out) / kRunManifestName);
  return kOk;
}

struct LossesArgs {
  std::string case_dir, pred, ref, loss, out, grad;
};

int cmd_losses(const LossesArgs& a, std::optional<Recorder>& rec) {
  const CaseBundle c = load_case(a.case_dir);
  const Grid3 pred = load_mvol_grid(a.pred);
  const Grid3 ref = a.ref.empty() ? c.dose : load_mvol_grid(a.ref);
  const LossConfig cfg = load_loss(a.loss);
  const LossValueGrad lg = total_loss_grad(pred, ref, c.structures, cfg);
  if (!std::isfinite(lg.value)) throw Error(ErrorKind::Numerical, "loss is not finite");
  ojson j;
  j["value"] = lg.value;
  j["terms"] = lg.terms;
  j["loss"] = to_json(cfg);
  if (!a.grad.empty()) save_mvol(a.grad, lg.grad);
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
    return kOk;
  }
  write_json(a.out, j);
  rec->manifest().config = {{"loss", to_json(cfg)}};
  rec->output(a.out);
  if (!a.grad.empty()) rec->output(a.grad);
  rec->finish(manifest_path_for(a.out));
  return kOk;
}

struct GradcheckArgs {
  std::string loss, out;
  std::uint64_t seed = 1;
  int samples = 40;
  double h = 1e-4;
  int n = 16;
};

int cmd_gradcheck(const GradcheckArgs& a, std::optional<Recorder>& rec) {
  const LossConfig cfg = load_loss(a.loss);
  const auto inst = random_gradcheck_instance(a.seed, a.n);
  const auto results = gradcheck_terms(cfg, inst, a.samples, a.h, a.seed);
  ojson j;
  std::string names;
  double worst = 0.0;
  bool pass = true;
  j["terms"] = ojson::array();
  for (const auto& r : results) {
    names += (names.empty() ? "" : "+") + r.term;
    worst = std::max(worst, r.result.max_rel_err);
    pass = pass && r.result.max_rel_err < gradcheck_tolerance(r.term);
    auto t = to_json(r);
    t["tolerance"] = gradcheck_tolerance(r.term);
    j["terms"].push_back(t);
  }
  j["term"] = names;
  j["max_rel_err"] = worst;
  j["samples"] = a.samples;
  j["h"] = a.h;
  j["seed"] = a.seed;
  j["pass"] = pass;
  std::cout << j.dump(2) << "\n";
  if (!a.out.empty()) {
    write_json(a.out, j);
    rec->manifest().seeds["seed"] = a.seed;
    rec->manifest().config = {{"loss", to_json(cfg)}, {"samples", a.samples}, {"h", a.h}, {"n", a.n}};
    rec->output(a.out);
    rec->finish(manifest_path_for(a.out));
  }
  if (!pass) {
    std::cerr << "gradcheck failed: max relative error " << worst << "\n";
    return kNumerical;
  }
  return kOk;
}

struct MimicArgs {
  std::string case_dir, loss, opt, init = "zeros", out, dose;
  int restart_id = 0;
};

int cmd_mimic(const MimicArgs& a, Recorder& rec) {
  const CaseBundle c = load_case(a.case_dir);
  const LossConfig loss = load_loss(a.loss);
  const OptimizerConfig opt = load_opt(a.opt);
  const InitSpec init = parse_init(a.init);
  MimicOptions mo;
  if (g_verbose)
    mo.progress = [&](int it, double l) {
      if (it % 100 == 0 || it == opt.iterations) std::cerr << "iteration " << it << " loss " << l << "\n";
    };
  const MimicResult r = mimic_dose(c, loss, opt, init, a.restart_id, mo);
  ojson j = to_json(r, c.dose, c.structures);
  j["case_id"] = c.case_id;
  j["init"] = init.describe();
  write_json(a.out, j);
  if (!a.dose.empty()) save_mvol(a.dose, r.dose);
  std::cout << "dose_score " << j["dose_score"].get<double>() << " dvh_score " << j["dvh_score"].get<double>()
            << "\n";

  auto& m = rec.manifest();
  if (init.kind == InitKind::Random) m.seeds["init"] = init.seed;
  m.config = {{"loss", to_json(loss)}, {"opt", to_json(opt)}, {"init", init.describe()}, {"restart_id", a.restart_id}};
  m.timing["mimic"] = to_json(r.timing);
  rec.output(a.out);
  if (!a.dose.empty()) rec.output(a.dose);
  rec.finish(manifest_path_for(a.out));
  return kOk;
}

struct ProbeArgs {
  std::string kind = "convexity", case_dir, loss, opt, out;
  std::uint64_t seed = 1;
  int pairs = 1000;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int reps = 20;
};

CaseBundle probe_case(const ProbeArgs& a) {
  if (!a.case_dir.empty()) return load_case(a.case_dir);
  PhantomSpec spec;
  spec.seed = a.seed;
  spec.dims = {16, 16, 16};
  spec.spacing = {16, 16, 16};
  return generate_phantom(spec);
}

ojson convexity_probe(const CaseBundle& c, const LossConfig& loss, int pairs, std::uint64_t seed) {
  const StructureMask& ptv = c.ptv();
  std::vector<std::pair<std::string, ScalarFn>> fns;
  for (int p : {1, 2, 10})
    fns.emplace_back("M_" + std::to_string(p), [&ptv, p](const Grid3& x) { return moment(x, ptv, p).value; });
  fns.emplace_back("L_MAE", [&](const Grid3& x) { return mae_loss_grad(x, c.dose).value; });
  fns.emplace_back("L_DVH", [&](const Grid3& x) { return dvh_loss_grad(x, c.dose, c.structures, loss.dvh).value; });

  std::vector<double> shifts;
  for (double t : loss.dvh.thresholds) shifts.push_back(t);
  ojson j;
  j["case_id"] = c.case_id;
  j["pairs"] = pairs;
  j["seed"] = seed;
  j["functions"] = ojson::array();
  for (const auto& [name, fn] : fns) {
    ojson f{{"name", name}, {"random", to_json(midpoint_convexity_probe(fn, c.dose.geometry, pairs, seed))}};
    if (name == "L_DVH") f["straddle"] = to_json(threshold_straddle_probe(fn, c.dose, shifts));
    j["functions"].push_back(f);
  }
  return j;
}

int cmd_probe(const ProbeArgs& a, std::optional<Recorder>& rec) {
  const LossConfig loss = load_loss(a.loss);
  ojson j;
  if (a.kind == "convexity") {
    j = convexity_probe(probe_case(a), loss, a.pairs, a.seed);
  } else if (a.kind == "restart") {
    const CaseBundle c = probe_case(a);
    const OptimizerConfig opt = load_opt(a.opt);
    j = to_json(restart_study(c, loss, opt, a.seeds), a.seeds);
    j["case_id"] = c.case_id;
  } else if (a.kind == "cost") {
    const CaseBundle c = probe_case(a);
    LossConfig mom = loss, dvh = loss;
    mom.enabled = {LossTerm::MAE, LossTerm::MOMENT};
    dvh.enabled = {LossTerm::MAE, LossTerm::DVH};
    const double tm = iteration_cost(c, mom, a.reps, a.seed);
    const double td = iteration_cost(c, dvh, a.reps, a.seed);
    j = {{"case_id", c.case_id}, {"reps", a.reps}, {"mae_moment_s", tm}, {"mae_dvh_s", td}, {"ratio", tm / td},
         {"dvh_thresholds", dvh.dvh.thresholds.size()}};
  } else {
    throw UsageError("--kind must be convexity, restart or cost");
  }
  j["kind"] = a.kind;
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
    return kOk;
  }
  write_json(a.out, j);
  auto& m = rec->manifest();
  m.seeds["seed"] = a.seed;
  if (a.kind == "restart") m.config["seeds"] = a.seeds;
  m.config["kind"] = a.kind;
  m.config["loss"] = to_json(loss);
  m.config["deterministic"] = a.kind != "cost";
  rec->output(a.out);
  rec->finish(manifest_path_for(a.out));
  return kOk;
}

struct TrainArgs {
  std::string data, loss, model, opt, out;
  std::uint64_t seed = 7;
  int epochs = 40;
};

std::vector<TrainSample> load_split(const Manifest& m, const std::string& split, Index3 dims) {
  std::vector<TrainSample> out;
  for (const auto& e : m.subset(split)) out.push_back(make_sample(load_case(m.case_dir(e)), dims));
  return out;
}

int cmd_train(const TrainArgs& a, Recorder& rec) {
  const Manifest data = load_manifest(a.data);
  ModelConfig mc;
  if (!a.model.empty()) {
    const auto mj = read_json(a.model);
    mc = model_config_from_json(mj);
    if (!mj.contains("seed")) mc.seed = a.seed;
  } else {
    mc.seed = a.seed;
  }
  TrainConfig tc;
  tc.loss = load_loss(a.loss);
  tc.opt = load_opt(a.opt);
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.validate();

  const auto train_set = load_split(data, "train", mc.dims);
  const auto val_set = load_split(data, "val", mc.dims);
  const auto test_set = load_split(data, "test", mc.dims);
  log("train " + std::to_string(train_set.size()) + ", val " + std::to_string(val_set.size()) + ", test " +
      std::to_string(test_set.size()));

  TinyUNet<float> model(mc);
  const auto t0 = clock_type::now();
  const TrainResult r = train(model, train_set, val_set, tc, [](const EpochLog& e) {
    log("epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss) + " val_dvh " +
        std::to_string(e.val_dvh_score));
  });
  const double train_s = std::chrono::duration<double>(clock_type::now() - t0).count();

  const fs::path out(a.out);
  fs::create_directories(out);
  save_checkpoint(out / "final.ckpt", mc, r.final_params, tc.epochs);
  save_checkpoint(out / "best.ckpt", mc, r.best_params, r.best_epoch);
  ojson log_j = ojson::array();
  for (const auto& e : r.log) log_j.push_back(to_json(e));
  write_json(out / "log.json", log_j);

  ojson summary{{"best_epoch", r.best_epoch}, {"best_val_dvh", r.best_val_dvh}, {"epochs", tc.epochs}};
  if (!test_set.empty()) {
    model.params() = r.best_params;
    const HoldoutReport h = evaluate_holdout(model, test_set);
    fs::create_directories(out / "metrics");
    for (const auto& c : h.cases) write_json(out / "metrics" / (c.case_id + ".json"), to_json(c));
    summary["test_mean_dose_score"] = h.mean_dose_score;
    summary["test_mean_dvh_score"] = h.mean_dvh_score;
  }
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << "\n";

  auto& m = rec.manifest();
  m.seeds["seed"] = a.seed;
  m.seeds["model"] = mc.seed;
  m.config = {{"model", to_json(mc)}, {"loss", to_json(tc.loss)}, {"opt", to_json(tc.opt)}, {"epochs", tc.epochs},
              {"data", a.data}};
  m.timing["train_s"] = train_s;
  m.timing["mean_epoch_s"] = train_s / tc.epochs;
  rec.output(out);
  rec.finish(out / kRunManifestName);
  return kOk;
}

struct PredictArgs {
  std::string ckpt, case_dir, out;
};

int cmd_predict(const PredictArgs& a, Recorder& rec) {
  const TinyUNet<float> model = load_checkpoint(a.ckpt);
  const TrainSample s = make_sample(load_case(a.case_dir), model.config().dims);
  save_mvol(a.out, predict_dose(model, s.input, s.bundle.dose.geometry));
  rec.manifest().config = {{"model", to_json(model.config())}, {"ckpt", a.ckpt}};
  rec.output(a.out);
  rec.finish(manifest_path_for(a.out));
  return kOk;
}

struct EvalArgs {
  std::string pred, ref, case_dir, out, csv, id, max_mode = "absolute";
  double rx = 60.0;
  bool no_curves = false;
};

int cmd_eval(const EvalArgs& a, std::optional<Recorder>& rec) {
  const CaseBundle c = load_case(a.case_dir);
  const Grid3 pred = load_mvol_grid(a.pred);
  const Grid3 ref = a.ref.empty() ? c.dose : load_mvol_grid(a.ref);
  ReportOptions opt;
  opt.prescription = a.rx;
  opt.include_curves = !a.no_curves;
  if (a.max_mode == "absolute")
    opt.max_mode = MaxDoseMode::Absolute;
  else if (a.max_mode == "d0.1cc")
    opt.max_mode = MaxDoseMode::D0_1cc;
  else
    throw UsageError("--max-mode must be absolute or d0.1cc");
  const MetricsReport r = evaluate_case(pred, ref, c.structures, a.id.empty() ? c.case_id : a.id, opt);
  const ojson j = to_json(r);
  if (!a.csv.empty()) {
    if (fs::path(a.csv).has_parent_path()) fs::create_directories(fs::path(a.csv).parent_path());
    std::ofstream csv(a.csv);
    if (!csv) throw Error(ErrorKind::Io, "cannot write " + a.csv);
    csv.precision(10);
    csv << "case_id,structure,criterion,ref,pred,abs_error\n";
    for (const auto& e : r.criteria)
      csv << csv_field(r.case_id) << ',' << csv_field(e.structure) << ',' << csv_field(e.criterion) << ',' << e.ref
          << ',' << e.pred << ',' << e.abs_error << '\n';
  }
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(a.out, j);
    std::cout << "dose_score " << r.dose_score << " dvh_score " << r.dvh_score << "\n";
  }
  if (rec) {
    rec->manifest().config = {{"rx", a.rx}, {"max_mode", a.max_mode}, {"curves", !a.no_curves}};
    if (!a.out.empty()) rec->output(a.out);
    if (!a.csv.empty()) rec->output(a.csv);
    rec->finish(manifest_path_for(a.out.empty() ? a.csv : a.out));
  }
  return kOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out, csv, compare_csv;
  double rx = 60.0;
};

int cmd_report(const ReportArgs& a, std::optional<Recorder>& rec) {
  std::vector<RunReports> runs;
  for (const auto& d : a.runs) runs.push_back(load_run_reports(d));
  const AggregateReport agg = aggregate_runs(runs, a.rx);
  const ojson j = plot_data(agg, runs);
  auto write_csv = [](const std::string& path, auto&& writer) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
    writer(out);
  };
  if (!a.csv.empty()) write_csv(a.csv, [&](std::ostream& o) { write_aggregate_csv(o, agg); });
  if (!a.compare_csv.empty()) write_csv(a.compare_csv, [&](std::ostream& o) { write_comparison_csv(o, agg); });
  if (a.out.empty()) {
    write_aggregate_csv(std::cout, agg);
    return kOk;
  }
  write_json(a.out, j);
  if (rec) {
    rec->manifest().config = {{"runs", a.runs}, {"rx", a.rx}};
    rec->output(a.out);
    if (!a.csv.empty()) rec->output(a.csv);
    if (!a.compare_csv.empty()) rec->output(a.compare_csv);
    rec->finish(manifest_path_for(a.out));
  }
  return kOk;
}

int run(const std::vector<std::string>& args);

int cmd_replay(const std::string& manifest_path) {
  const fs::path mp = fs::absolute(manifest_path);
  const RunManifest m = load_run_manifest(mp);
  std::string original;
  {
    std::ifstream in(mp);
    original.assign(std::istreambuf_iterator<char>(in), {});
  }
  if (m.argv.empty() || m.argv.front() == "replay") throw Error(ErrorKind::Io, "manifest has no replayable command");

  const fs::path here = fs::current_path();
  fs::current_path(m.cwd);
  for (const auto& [k, v] : m.env) setenv(k.c_str(), v.c_str(), 1);
  if (!m.env.count("DOSEKIT_SEED")) unsetenv("DOSEKIT_SEED");
  int code = kOk;
  ojson j;
  j["command"] = m.command;
  j["outputs"] = ojson::array();
  bool identical = true;
  try {
    std::ostringstream sink;
    auto* saved = std::cout.rdbuf(sink.rdbuf());
    try {
      code = run(m.argv);
    } catch (...) {
      std::cout.rdbuf(saved);
      throw;
    }
    std::cout.rdbuf(saved);
    for (const auto& o : m.outputs) {
      const std::string now = content_hash(o.path, {kRunManifestName});
      identical = identical && now == o.hash;
      j["outputs"].push_back({{"path", o.path}, {"expected", o.hash}, {"actual", now}, {"match", now == o.hash}});
    }
  } catch (...) {
    fs::current_path(here);
    std::ofstream(mp) << original;
    throw;
  }
  std::ofstream(mp) << original;
  fs::current_path(here);

  const bool deterministic = !m.config.contains("deterministic") || m.config["deterministic"].get<bool>();
  j["exit_code"] = code;
  j["deterministic"] = deterministic;
  j["identical"] = identical;
  std::cout << j.dump(2) << "\n";
  if (code != kOk) return code;
  if (deterministic && !identical) {
    std::cerr << "replay produced different outputs\n";
    return kNumerical;
  }
  return kOk;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"dosekit: dose objectives, metrics, mimicking and a small predictor"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("--verbose", g_verbose, "progress on stderr");
  app.set_version_flag("--version", DOSEKIT_VERSION);

  PhantomArgs ph;
  ph.seed = env_seed(17);
  auto* s_ph = app.add_subcommand("phantom", "generate a synthetic dataset");
  s_ph->add_option("--n", ph.n, "number of cases")->check(CLI::PositiveNumber);
  s_ph->add_option("--seed", ph.seed, "seed of the first case");
  s_ph->add_option("--dims", ph.dims, "grid size x,y,z")->delimiter(',')->expected(3);
  s_ph->add_option("--extent", ph.extent_mm, "physical extent per axis in mm");
  s_ph->add_option("--out", ph.out, "output directory")->required();
  s_ph->add_option("--split", ph.split, "train,val,test counts")->delimiter(',')->expected(3);

  PreprocessArgs pp;
  auto* s_pp = app.add_subcommand("preprocess", "crop, resample and normalise a case");
  s_pp->add_option("--in", pp.in, "input case directory")->required();
  s_pp->add_option("--out", pp.out, "output case directory")->required();
  s_pp->add_option("--crop", pp.crop, "crop window in voxels")->delimiter(',')->expected(3);
  s_pp->add_option("--net", pp.net, "network grid")->delimiter(',')->expected(3);
  s_pp->add_option("--rx", pp.rx, "prescription in Gy");
  s_pp->add_option("--hu-clip", pp.hu, "HU clip low,high")->delimiter(',')->expected(2);

  LossesArgs ls;
  auto* s_ls = app.add_subcommand("losses", "evaluate a loss configuration on a dose");
  s_ls->add_option("--case", ls.case_dir, "case directory")->required();
  s_ls->add_option("--pred", ls.pred, "predicted dose (MVOL)")->required();
  s_ls->add_option("--ref", ls.ref, "reference dose (default: the case dose)");
  s_ls->add_option("--loss", ls.loss, "loss config JSON");
  s_ls->add_option("--out", ls.out, "JSON output");
  s_ls->add_option("--grad", ls.grad, "gradient output (MVOL)");

  GradcheckArgs gc;
  gc.seed = env_seed(1);
  auto* s_gc = app.add_subcommand("gradcheck", "finite-difference check of each loss term");
  s_gc->add_option("--loss", gc.loss, "loss config JSON")->required();
  s_gc->add_option("--seed", gc.seed, "instance and sampling seed");
  s_gc->add_option("--samples", gc.samples, "voxels checked per term")->check(CLI::PositiveNumber);
  s_gc->add_option("--step", gc.h, "central-difference step")->check(CLI::PositiveNumber);
  s_gc->add_option("--n", gc.n, "grid size")->check(CLI::PositiveNumber);
  s_gc->add_option("--out", gc.out, "JSON output");

  MimicArgs mi;
  auto* s_mi = app.add_subcommand("mimic", "optimise a dose voxelwise against a reference");
  s_mi->add_option("--case", mi.case_dir, "reference case directory")->required();
  s_mi->add_option("--loss", mi.loss, "loss config JSON");
  s_mi->add_option("--opt", mi.opt, "optimizer config JSON");
  s_mi->add_option("--init", mi.init, "zeros, uniform:<Gy> or rand:<seed>")->check([](const std::string& s) {
    try {
      parse_init(s);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  });
  s_mi->add_option("--restart-id", mi.restart_id, "label stored in the result");
  s_mi->add_option("--out", mi.out, "result JSON")->required();
  s_mi->add_option("--dose", mi.dose, "final dose (MVOL)");

  ProbeArgs pr;
  pr.seed = env_seed(1);
  auto* s_pr = app.add_subcommand("probe", "convexity, restart and cost studies");
  s_pr->add_option("--kind", pr.kind, "convexity, restart or cost")
      ->check(CLI::IsMember({"convexity", "restart", "cost"}));
  s_pr->add_option("--case", pr.case_dir, "case directory (default: a 16^3 phantom from --seed)");
  s_pr->add_option("--loss", pr.loss, "loss config JSON");
  s_pr->add_option("--opt", pr.opt, "optimizer config JSON (restart)");
  s_pr->add_option("--seed", pr.seed, "probe seed");
  s_pr->add_option("--pairs", pr.pairs, "random pairs (convexity)")->check(CLI::PositiveNumber);
  s_pr->add_option("--seeds", pr.seeds, "restart seeds")->delimiter(',');
  s_pr->add_option("--reps", pr.reps, "timed iterations (cost)")->check(CLI::PositiveNumber);
  s_pr->add_option("--out", pr.out, "JSON output");

  TrainArgs tr;
  tr.seed = env_seed(7);
  auto* s_tr = app.add_subcommand("train", "train the predictor on a dataset manifest");
  s_tr->add_option("--data", tr.data, "dataset manifest.json")->required();
  s_tr->add_option("--loss", tr.loss, "loss config JSON");
  s_tr->add_option("--model", tr.model, "model config JSON");
  s_tr->add_option("--opt", tr.opt, "optimizer config JSON");
  s_tr->add_option("--seed", tr.seed, "shuffle and initialisation seed");
  s_tr->add_option("--epochs", tr.epochs, "epochs (even)")->check(CLI::PositiveNumber);
  s_tr->add_option("--out", tr.out, "run directory")->required();

  PredictArgs pd;
  auto* s_pd = app.add_subcommand("predict", "predict a dose with a checkpoint");
  s_pd->add_option("--ckpt", pd.ckpt, "checkpoint")->required();
  s_pd->add_option("--case", pd.case_dir, "case directory")->required();
  s_pd->add_option("--out", pd.out, "predicted dose (MVOL)")->required();

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "metrics of a predicted dose against a reference");
  s_ev->add_option("--pred", ev.pred, "predicted dose (MVOL)")->required();
  s_ev->add_option("--ref", ev.ref, "reference dose (default: the case dose)");
  s_ev->add_option("--case", ev.case_dir, "case directory with masks")->required();
  s_ev->add_option("--out", ev.out, "report JSON (default: stdout)");
  s_ev->add_option("--csv", ev.csv, "per-criterion CSV");
  s_ev->add_option("--id", ev.id, "case id written to the report");
  s_ev->add_option("--rx", ev.rx, "prescription in Gy");
  s_ev->add_option("--max-mode", ev.max_mode, "absolute or d0.1cc");
  s_ev->add_flag("--no-curves", ev.no_curves, "leave DVH curves out of the report");

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "aggregate run directories into tables and plot data");
  s_rp->add_option("runs", rp.runs, "run directories (first is the baseline)")->required();
  s_rp->add_option("--rx", rp.rx, "prescription in Gy");
  s_rp->add_option("--out", rp.out, "plot-data JSON");
  s_rp->add_option("--csv", rp.csv, "aggregate CSV");
  s_rp->add_option("--compare-csv", rp.compare_csv, "relative improvement CSV");

  std::string replay_path;
  auto* s_rl = app.add_subcommand("replay", "re-run a command from its run manifest and compare outputs");
  s_rl->add_option("manifest", replay_path, "run manifest")->required();

  std::vector<std::string> argv_store{"dosekit"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  set_num_threads(threads);
  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  std::optional<Recorder> rec;
  if (name != "replay") rec.emplace(name, args);
  if (rec) rec->manifest().config["threads"] = threads;

  if (sub == s_ph) return cmd_phantom(ph, *rec);
  if (sub == s_pp) return cmd_preprocess(pp, *rec);
  if (sub == s_ls) return cmd_losses(ls, rec);
  if (sub == s_gc) return cmd_gradcheck(gc, rec);
  if (sub == s_mi) return cmd_mimic(mi, *rec);
  if (sub == s_pr) return cmd_probe(pr, rec);
  if (sub == s_tr) return cmd_train(tr, *rec);
  if (sub == s_pd) return cmd_predict(pd, *rec);
  if (sub == s_ev) {
    if (ev.out.empty() && ev.csv.empty()) rec.reset();
    return cmd_eval(ev, rec);
  }
  if (sub == s_rp) {
    if (rp.out.empty()) rec.reset();
    return cmd_report(rp, rec);
  }
  return cmd_replay(replay_path);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Numerical ? kNumerical : kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}
