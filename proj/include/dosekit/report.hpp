#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/metrics.hpp"

namespace dosekit {

/// Per-case metric reports of one run directory (`<dir>/metrics/*.json`).
struct RunReports {
  std::string name;
  std::vector<MetricsReport> cases;
};

inline RunReports load_run_reports(const std::filesystem::path& dir) {
  const auto metrics = dir / "metrics";
  if (!std::filesystem::is_directory(metrics))
    throw Error(ErrorKind::Io, "run directory has no metrics/ folder: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(metrics))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::Io, "no metric reports in " + metrics.string());

  RunReports run;
  run.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Io, f.string() + ": " + e.what());
    }
    run.cases.push_back(metrics_report_from_json(j));
  }
  return run;
}

enum class MetricUnit { PercentRx, Index };

/// One scalar per case and metric. Dose metrics are converted to percent of prescription.
struct MetricSample {
  std::string metric;
  MetricUnit unit;
  double value;
};

inline std::vector<MetricSample> case_metrics(const MetricsReport& r, double prescription) {
  const double pct = 100.0 / prescription;
  std::vector<MetricSample> out;
  out.push_back({"dose_score", MetricUnit::PercentRx, r.dose_score * pct});
  out.push_back({"dvh_score", MetricUnit::PercentRx, r.dvh_score * pct});
  for (const auto& c : r.criteria) out.push_back({c.structure + " " + c.criterion, MetricUnit::PercentRx, c.abs_error * pct});
  out.push_back({"hi_error", MetricUnit::Index, r.hi_error});
  out.push_back({"pci_error", MetricUnit::Index, r.pci_error});
  return out;
}

struct AggregateRow {
  std::string metric;
  MetricUnit unit = MetricUnit::PercentRx;
  int n = 0;          // cases with a defined value
  double mean = 0.0;  // NaN when n = 0
  double sd = 0.0;                     // sample standard deviation
  std::optional<double> ci_half;       // 1.96 * sd / sqrt(n); empty when n = 1
};

inline const char* ci_omitted_marker() { return "n=1, CI omitted"; }

struct RunAggregate {
  std::string name;
  int cases = 0;
  std::vector<AggregateRow> rows;
};

inline RunAggregate aggregate_run(const RunReports& run, double prescription) {
  if (!(prescription > 0.0)) throw Error(ErrorKind::Config, "prescription must be positive");
  if (run.cases.empty()) throw Error(ErrorKind::Config, "run '" + run.name + "' has no cases");
  RunAggregate agg;
  agg.name = run.name;
  agg.cases = static_cast<int>(run.cases.size());

  std::vector<std::vector<double>> values;
  for (std::size_t c = 0; c < run.cases.size(); ++c) {
    const auto samples = case_metrics(run.cases[c], prescription);
    if (c == 0) {
      for (const auto& s : samples) {
        AggregateRow row;
        row.metric = s.metric;
        row.unit = s.unit;
        agg.rows.push_back(row);
      }
      values.resize(samples.size());
    } else if (samples.size() != agg.rows.size()) {
      throw Error(ErrorKind::Config, "inconsistent criteria sets within run '" + run.name + "' (case " +
                                         run.cases[c].case_id + ")");
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].metric != agg.rows[i].metric)
        throw Error(ErrorKind::Config, "inconsistent criteria sets within run '" + run.name + "': '" +
                                           samples[i].metric + "' vs '" + agg.rows[i].metric + "'");
      if (std::isfinite(samples[i].value)) values[i].push_back(samples[i].value);
    }
  }
  for (std::size_t i = 0; i < agg.rows.size(); ++i) {
    auto& row = agg.rows[i];
    const auto& v = values[i];
    row.n = static_cast<int>(v.size());
    if (row.n == 0) {
      row.mean = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    for (double x : v) row.mean += x;
    row.mean /= row.n;
    if (row.n > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - row.mean) * (x - row.mean);
      row.sd = std::sqrt(ss / (row.n - 1));
      row.ci_half = 1.96 * row.sd / std::sqrt(static_cast<double>(row.n));
    }
  }
  return agg;
}

/// (a - b) / a in percent; empty when a is 0.
inline std::optional<double> relative_improvement(double a, double b) {
  if (a == 0.0) return std::nullopt;
  return 100.0 * (a - b) / a;
}

struct ComparisonRow {
  std::string metric;
  double baseline = 0.0;
  double candidate = 0.0;
  std::optional<double> improvement_pct;
};

inline std::vector<ComparisonRow> compare_runs(const RunAggregate& baseline, const RunAggregate& candidate) {
  if (baseline.rows.size() != candidate.rows.size())
    throw Error(ErrorKind::Config, "inconsistent criteria sets between runs '" + baseline.name + "' and '" +
                                       candidate.name + "'");
  std::vector<ComparisonRow> out;
  for (std::size_t i = 0; i < baseline.rows.size(); ++i) {
    const auto& a = baseline.rows[i];
    const auto& b = candidate.rows[i];
    if (a.metric != b.metric)
      throw Error(ErrorKind::Config, "inconsistent criteria sets between runs: '" + a.metric + "' vs '" + b.metric + "'");
    out.push_back({a.metric, a.mean, b.mean, relative_improvement(a.mean, b.mean)});
  }
  return out;
}

struct AggregateReport {
  double prescription = 60.0;
  std::vector<RunAggregate> runs;
  std::vector<ComparisonRow> comparison;  // first run is the baseline, second the candidate
};

inline AggregateReport aggregate_runs(const std::vector<RunReports>& runs, double prescription) {
  if (runs.empty()) throw Error(ErrorKind::Config, "no runs to aggregate");
  AggregateReport report;
  report.prescription = prescription;
  for (const auto& r : runs) report.runs.push_back(aggregate_run(r, prescription));
  for (std::size_t i = 1; i < report.runs.size(); ++i) compare_runs(report.runs[0], report.runs[i]);
  if (report.runs.size() >= 2) report.comparison = compare_runs(report.runs[0], report.runs[1]);
  return report;
}

inline const char* unit_label(MetricUnit u) { return u == MetricUnit::PercentRx ? "%Rx" : "index"; }

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json to_json(const AggregateRow& r) {
  nlohmann::ordered_json j{{"metric", r.metric}, {"unit", unit_label(r.unit)}, {"n", r.n}, {"mean", r.mean}, {"sd", r.sd}};
  if (r.ci_half) {
    j["ci_low"] = r.mean - *r.ci_half;
    j["ci_high"] = r.mean + *r.ci_half;
  } else {
    j["ci"] = ci_omitted_marker();
  }
  return j;
}

/// Aggregates plus DVH curve points for external plotting.
inline nlohmann::ordered_json plot_data(const AggregateReport& report, const std::vector<RunReports>& runs) {
  nlohmann::ordered_json j;
  j["prescription"] = report.prescription;
  j["runs"] = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < report.runs.size(); ++r) {
    nlohmann::ordered_json run{{"name", report.runs[r].name}, {"cases", report.runs[r].cases}};
    run["errors"] = nlohmann::ordered_json::array();
    for (const auto& row : report.runs[r].rows) run["errors"].push_back(to_json(row));
    run["dvh_curves"] = nlohmann::ordered_json::array();
    for (const auto& c : runs[r].cases) {
      for (const auto& [kind, curves] : {std::pair{"ref", &c.dvh_ref}, std::pair{"pred", &c.dvh_pred}})
        for (const auto& curve : *curves) {
          auto cj = to_json(curve);
          cj["case_id"] = c.case_id;
          cj["kind"] = kind;
          run["dvh_curves"].push_back(cj);
        }
    }
    j["runs"].push_back(run);
  }
  j["comparison"] = nlohmann::ordered_json::array();
  for (const auto& c : report.comparison)
    j["comparison"].push_back({{"metric", c.metric},
                               {"baseline", c.baseline},
                               {"candidate", c.candidate},
                               {"relative_improvement_pct", optional_json(c.improvement_pct)}});
  return j;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline void write_aggregate_csv(std::ostream& out, const AggregateReport& report) {
  out.precision(10);
  out << "run,metric,unit,n,mean,sd,ci_low,ci_high,note\n";
  for (const auto& run : report.runs)
    for (const auto& r : run.rows) {
      out << csv_field(run.name) << ',' << csv_field(r.metric) << ',' << unit_label(r.unit) << ',' << r.n << ','
          << r.mean << ',' << r.sd << ',';
      if (r.ci_half)
        out << r.mean - *r.ci_half << ',' << r.mean + *r.ci_half << ",\n";
      else
        out << ",," << csv_field(ci_omitted_marker()) << '\n';
    }
}

inline void write_comparison_csv(std::ostream& out, const AggregateReport& report) {
  out.precision(10);
  out << "metric,baseline,candidate,relative_improvement_pct\n";
  for (const auto& c : report.comparison) {
    out << csv_field(c.metric) << ',' << c.baseline << ',' << c.candidate << ',';
    if (c.improvement_pct) out << *c.improvement_pct;
    out << '\n';
  }
}

}  // namespace dosekit
