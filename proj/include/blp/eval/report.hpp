#pragma once

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "blp/eval/analysis.hpp"

namespace blp::eval {

/// One machine-readable report value.
struct ReportRow {
  std::string metric;
  std::string split;
  std::string condition;  // "all", "seen", "unseen" or a condition key
  std::optional<int> s;
  std::optional<std::uint64_t> seed;
  double value = 0.0;
};

inline nlohmann::json to_json(const ReportRow& r) {
  nlohmann::json j = {{"metric", r.metric}, {"split", r.split}, {"condition", r.condition}};
  j["S"] = r.s ? nlohmann::json(*r.s) : nlohmann::json(nullptr);
  j["seed"] = r.seed ? nlohmann::json(*r.seed) : nlohmann::json(nullptr);
  j["value"] = r.value;
  return j;
}

inline void append_metrics(std::vector<ReportRow>& rows, const Metrics& m, const std::string& split,
                           const std::string& condition, std::optional<int> s, std::optional<std::uint64_t> seed,
                           const std::string& acc_name) {
  rows.push_back({"mape", split, condition, s, seed, m.mape});
  rows.push_back({acc_name, split, condition, s, seed, m.acc});
  rows.push_back({"n", split, condition, s, seed, static_cast<double>(m.n)});
}

inline std::string acc_metric_name(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "acc%g", alpha * 100.0);
  return buf;
}

inline std::vector<ReportRow> report_rows(const EvalReport& rep, double alpha) {
  const std::string acc = acc_metric_name(alpha);
  std::vector<ReportRow> rows;
  for (const auto& r : rep.runs) {
    if (r.val) append_metrics(rows, *r.val, "val", "all", std::nullopt, r.seed, acc);
    append_metrics(rows, r.test, "test", "all", std::nullopt, r.seed, acc);
    for (const auto& [s, m] : r.per_s) append_metrics(rows, m, "test", "all", s, r.seed, acc);
    for (const auto& c : r.per_condition) append_metrics(rows, c.metrics, "test", c.condition.key(), std::nullopt, r.seed, acc);
    Metrics seen{}, unseen{};
    // seen/unseen partitions rebuilt from the per-condition breakdown
    double sm = 0, sa = 0, um = 0, ua = 0;
    for (const auto& c : r.per_condition) {
      if (!c.seen) continue;
      auto& tgt = *c.seen ? seen : unseen;
      double& tm = *c.seen ? sm : um;
      double& ta = *c.seen ? sa : ua;
      tgt.n += c.metrics.n;
      tm += c.metrics.mape * static_cast<double>(c.metrics.n);
      ta += c.metrics.acc * static_cast<double>(c.metrics.n);
    }
    if (seen.n) append_metrics(rows, {seen.n, sm / static_cast<double>(seen.n), sa / static_cast<double>(seen.n)}, "test", "seen", std::nullopt, r.seed, acc);
    if (unseen.n) append_metrics(rows, {unseen.n, um / static_cast<double>(unseen.n), ua / static_cast<double>(unseen.n)}, "test", "unseen", std::nullopt, r.seed, acc);
    rows.push_back({"best_epoch", "val", "all", std::nullopt, r.seed, static_cast<double>(r.best_epoch)});
  }
  rows.push_back({"mape_mean", "test", "all", std::nullopt, std::nullopt, rep.mape.mean});
  rows.push_back({"mape_std", "test", "all", std::nullopt, std::nullopt, rep.mape.std});
  rows.push_back({acc + "_mean", "test", "all", std::nullopt, std::nullopt, rep.acc.mean});
  rows.push_back({acc + "_std", "test", "all", std::nullopt, std::nullopt, rep.acc.std});
  for (const auto& [s, ms] : rep.per_s) {
    rows.push_back({"mape_mean", "test", "all", s, std::nullopt, ms.first.mean});
    rows.push_back({"mape_std", "test", "all", s, std::nullopt, ms.first.std});
    rows.push_back({acc + "_mean", "test", "all", s, std::nullopt, ms.second.mean});
    rows.push_back({acc + "_std", "test", "all", s, std::nullopt, ms.second.std});
  }
  return rows;
}

inline nlohmann::json rows_json(const std::vector<ReportRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) out.push_back(to_json(r));
  return out;
}

inline std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f +- %.4f", m.mean, m.std);
  return buf;
}

/// Human-readable summary of a report.
inline std::string report_table(const EvalReport& rep, double alpha) {
  std::ostringstream os;
  const std::string acc = acc_metric_name(alpha);
  os << "model " << rep.model << ", " << rep.runs.size() << " run(s)\n";
  os << "  test mape   " << format_mean_std(rep.mape) << "\n";
  os << "  test " << acc << "  " << format_mean_std(rep.acc) << "\n";
  for (const auto& r : rep.runs) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  seed %-6llu mape %.4f  %s %.4f  n %zu  best epoch %d%s\n",
                  static_cast<unsigned long long>(r.seed), r.test.mape, acc.c_str(), r.test.acc, r.test.n,
                  r.best_epoch, r.untrained ? "  (untrained)" : "");
    os << buf;
  }
  if (!rep.per_s.empty()) {
    os << "  S      mape              " << acc << "\n";
    for (const auto& [s, ms] : rep.per_s) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "  %-5d  %s  %s\n", s, format_mean_std(ms.first).c_str(),
                    format_mean_std(ms.second).c_str());
      os << buf;
    }
  }
  return os.str();
}

/// Plot data: S,mape,acc15 in ascending S.
inline std::string sweep_csv(const std::vector<SweepPoint>& points, double alpha) {
  std::ostringstream os;
  os << "S,mape," << acc_metric_name(alpha) << "\n";
  for (const auto& p : points) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", p.s, p.mape.mean, p.acc.mean);
    os << buf;
  }
  return os.str();
}

}  // namespace blp::eval
