#pragma once

// Per-condition report: bootstrap means, single-layer vs z-stack deltas and
// Tukey p-values over the full scanner x pipeline x mode design, emitted as
// one CSV per metric with columns
//   scanner,pipeline,layer_mode,metric,mean,ci_lo,ci_hi,delta_pct,p_value
// plus an Average row (unweighted mean of condition means, as in the source
// tables; its p is N/A).

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "zmd/stats.hpp"

namespace zmd {

enum class LayerMode { single, zstack };
enum class MetricKind { sensitivity, precision };

inline const char* layer_mode_name(LayerMode m) { return m == LayerMode::single ? "single" : "zstack"; }
inline const char* metric_kind_name(MetricKind m) {
  return m == MetricKind::sensitivity ? "sensitivity" : "precision";
}

inline LayerMode layer_mode_from_name(const std::string& s) {
  if (s == "single") return LayerMode::single;
  if (s == "zstack") return LayerMode::zstack;
  throw Error(ErrorCode::report, "unknown layer_mode: " + s);
}

inline MetricKind metric_kind_from_name(const std::string& s) {
  if (s == "sensitivity") return MetricKind::sensitivity;
  if (s == "precision") return MetricKind::precision;
  throw Error(ErrorCode::report, "unknown metric: " + s);
}

// One evaluation run's metric value for one scanner/pipeline/mode condition.
struct MetricSample {
  std::string scanner;
  std::string pipeline;
  LayerMode layer_mode = LayerMode::single;
  int run_index = 1;  // 1-based
  MetricKind metric = MetricKind::sensitivity;
  double value = 0.0;
};

struct ComparisonRow {
  std::string scanner;
  std::string pipeline;
  double single_mean = 0.0;
  double zstack_mean = 0.0;
  double delta_pct = 0.0;  // NaN when the single mean is zero
  double p_value = 1.0;    // NaN marks N/A (the Average row)
  BootstrapSummary single_boot;
  BootstrapSummary zstack_boot;
};

struct MetricReport {
  MetricKind metric = MetricKind::sensitivity;
  std::vector<ComparisonRow> rows;  // per condition, plus trailing Average row
  AnovaResult anova;                // over all condition x mode groups
  std::string csv;
};

struct Report {
  std::vector<MetricReport> metrics;  // sensitivity, then precision (when present)
};

struct ReportOptions {
  int n_boot = 10000;
  uint64_t seed = 0;
  double alpha = 0.05;
};

inline std::string format_delta_pct(double delta) {
  if (std::isnan(delta)) return "N/A";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", delta);
  return buf;
}

inline std::string format_p_value(double p) {
  if (std::isnan(p)) return "N/A";
  if (p < 0.0005) return "<0.001";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", p);
  return buf;
}

namespace detail {

inline std::string format_mean(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline Report build_report(const std::vector<MetricSample>& samples, const ReportOptions& opts = {}) {
  if (samples.empty()) throw Error(ErrorCode::report, "no metric samples");
  for (const auto& s : samples) {
    if (s.value < 0.0 || s.value > 1.0)
      throw Error(ErrorCode::report, "metric value out of [0,1]");
    if (s.run_index < 1) throw Error(ErrorCode::report, "run_index must be >= 1");
  }

  // group values by (metric, scanner, pipeline, mode), ordered by run
  using CondKey = std::pair<std::string, std::string>;
  std::map<MetricKind, std::map<CondKey, std::array<std::vector<std::pair<int, double>>, 2>>> table;
  for (const auto& s : samples)
    table[s.metric][{s.scanner, s.pipeline}][s.layer_mode == LayerMode::single ? 0 : 1]
        .emplace_back(s.run_index, s.value);

  // both modes must be present for every condition
  std::string absentees;
  for (auto& [metric, conds] : table)
    for (auto& [cond, modes] : conds)
      for (int m = 0; m < 2; ++m)
        if (modes[static_cast<std::size_t>(m)].empty())
          absentees += "\n  " + std::string(metric_kind_name(metric)) + "/" + cond.first + "/" +
                       cond.second + "/" + (m == 0 ? "single" : "zstack");
  if (!absentees.empty())
    throw Error(ErrorCode::report, "conditions missing a layer mode:" + absentees);

  Report report;
  for (auto& [metric, conds] : table) {
    MetricReport mr;
    mr.metric = metric;

    std::vector<std::vector<double>> groups;  // condition-major, single then zstack
    for (auto& [cond, modes] : conds) {
      for (auto& mode_values : modes) {
        std::sort(mode_values.begin(), mode_values.end());
        std::vector<double> values;
        for (auto& [run, v] : mode_values) values.push_back(v);
        groups.push_back(std::move(values));
      }
    }
    mr.anova = one_way_anova(groups);
    const auto tukey = tukey_hsd(groups, opts.alpha);

    auto pair_p = [&](std::size_t gi, std::size_t gj) {
      for (const auto& c : tukey)
        if (c.group_i == gi && c.group_j == gj) return c.p;
      throw Error(ErrorCode::report, "tukey pair lookup failed");
    };

    std::size_t cond_idx = 0;
    double avg_single = 0.0, avg_zstack = 0.0;
    for (auto& [cond, modes] : conds) {
      ComparisonRow row;
      row.scanner = cond.first;
      row.pipeline = cond.second;
      row.single_boot = bootstrap_mean(
          groups[2 * cond_idx], opts.n_boot,
          derive_seed(opts.seed, "boot",
                      {static_cast<int64_t>(fnv1a64(cond.first)),
                       static_cast<int64_t>(fnv1a64(cond.second)), 0,
                       static_cast<int64_t>(metric)}));
      row.zstack_boot = bootstrap_mean(
          groups[2 * cond_idx + 1], opts.n_boot,
          derive_seed(opts.seed, "boot",
                      {static_cast<int64_t>(fnv1a64(cond.first)),
                       static_cast<int64_t>(fnv1a64(cond.second)), 1,
                       static_cast<int64_t>(metric)}));
      row.single_mean = row.single_boot.mean;
      row.zstack_mean = row.zstack_boot.mean;
      row.delta_pct = row.single_mean > 0.0
                          ? (row.zstack_mean - row.single_mean) / row.single_mean * 100.0
                          : std::numeric_limits<double>::quiet_NaN();
      row.p_value = pair_p(2 * cond_idx, 2 * cond_idx + 1);
      avg_single += row.single_mean;
      avg_zstack += row.zstack_mean;
      mr.rows.push_back(std::move(row));
      ++cond_idx;
    }

    ComparisonRow avg;
    avg.scanner = "Average";
    avg.pipeline = "";
    avg.single_mean = avg_single / static_cast<double>(cond_idx);
    avg.zstack_mean = avg_zstack / static_cast<double>(cond_idx);
    avg.single_boot = {avg.single_mean, avg.single_mean, avg.single_mean};
    avg.zstack_boot = {avg.zstack_mean, avg.zstack_mean, avg.zstack_mean};
    avg.delta_pct = avg.single_mean > 0.0
                        ? (avg.zstack_mean - avg.single_mean) / avg.single_mean * 100.0
                        : std::numeric_limits<double>::quiet_NaN();
    avg.p_value = std::numeric_limits<double>::quiet_NaN();
    mr.rows.push_back(std::move(avg));

    // CSV
    std::ostringstream csv;
    csv << "scanner,pipeline,layer_mode,metric,mean,ci_lo,ci_hi,delta_pct,p_value\n";
    for (const auto& row : mr.rows) {
      const bool is_avg = row.scanner == "Average";
      for (int m = 0; m < 2; ++m) {
        const auto& boot = m == 0 ? row.single_boot : row.zstack_boot;
        csv << row.scanner << ',' << row.pipeline << ',' << (m == 0 ? "single" : "zstack") << ','
            << metric_kind_name(metric) << ',' << detail::format_mean(boot.mean) << ','
            << (is_avg ? "" : detail::format_mean(boot.ci95_lo)) << ','
            << (is_avg ? "" : detail::format_mean(boot.ci95_hi)) << ','
            << format_delta_pct(row.delta_pct) << ',' << format_p_value(row.p_value) << '\n';
      }
    }
    mr.csv = csv.str();
    report.metrics.push_back(std::move(mr));
  }
  return report;
}

// ---------------------------------------------------------------------------
// MetricSample CSV (columns scanner,pipeline,layer_mode,run_index,metric,value)
// ---------------------------------------------------------------------------

inline std::string metric_samples_to_csv(const std::vector<MetricSample>& samples) {
  std::ostringstream out;
  out << "scanner,pipeline,layer_mode,run_index,metric,value\n";
  for (const auto& s : samples) {
    char val[32];
    std::snprintf(val, sizeof val, "%.9f", s.value);
    out << s.scanner << ',' << s.pipeline << ',' << layer_mode_name(s.layer_mode) << ','
        << s.run_index << ',' << metric_kind_name(s.metric) << ',' << val << '\n';
  }
  return out.str();
}

inline std::vector<MetricSample> metric_samples_from_csv_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::report, "empty metric sample CSV");
  if (line != "scanner,pipeline,layer_mode,run_index,metric,value")
    throw Error(ErrorCode::report, "unexpected metric sample CSV header: " + line);
  std::vector<MetricSample> samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6)
      throw Error(ErrorCode::report,
                  "metric sample CSV line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      MetricSample s;
      s.scanner = fields[0];
      s.pipeline = fields[1];
      s.layer_mode = layer_mode_from_name(fields[2]);
      s.run_index = std::stoi(fields[3]);
      s.metric = metric_kind_from_name(fields[4]);
      s.value = std::stod(fields[5]);
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::report,
                  "metric sample CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

inline std::vector<MetricSample> read_metric_samples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::report, "cannot open metric sample CSV: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return metric_samples_from_csv_text(buf.str());
}

}  // namespace zmd
