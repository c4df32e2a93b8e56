#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "blp/core.hpp"

namespace blp::ingest {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Standardized battery file
//
// One battery per UTF-8 JSON file:
//   {"id", "condition": {nine aging factors}, "q0_mode", "manual_exclusions",
//    ["formation_cycles", "rpt_cycles",] "cycles": [{"index", "charge":
//    {"t","v","i"}, "discharge": {"t","v","i"}, "discharge_capacity"}]}
// Floats carry 9 significant digits. Cumulative capacity is not stored; it is
// recomputed from t and i on load.
// ---------------------------------------------------------------------------

inline std::string format_float(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

/// Rounds to what survives a save/load cycle.
inline double canonical_float(double x) { return std::strtod(format_float(x).c_str(), nullptr); }

namespace detail {

inline void write_string(std::string& out, std::string_view s) { out += json(s).dump(); }

inline void write_int_list(std::string& out, const std::vector<int>& xs) {
  out += '[';
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (k) out += ',';
    out += std::to_string(xs[k]);
  }
  out += ']';
}

template <typename Get>
void write_series(std::string& out, const std::vector<TimePoint>& pts, Get get) {
  out += '[';
  for (std::size_t k = 0; k < pts.size(); ++k) {
    if (k) out += ',';
    out += format_float(get(pts[k]));
  }
  out += ']';
}

inline void write_half(std::string& out, const std::vector<TimePoint>& pts) {
  out += "{\"t\":";
  write_series(out, pts, [](const TimePoint& p) { return p.t; });
  out += ",\"v\":";
  write_series(out, pts, [](const TimePoint& p) { return p.voltage; });
  out += ",\"i\":";
  write_series(out, pts, [](const TimePoint& p) { return p.current; });
  out += '}';
}

inline std::string q0_mode_name(Q0Mode m) { return m == Q0Mode::Nominal ? "nominal" : "first_cycle"; }

class Locus {
 public:
  explicit Locus(std::string path) : path_(std::move(path)) {}
  [[noreturn]] void fail(const std::string& where, const std::string& what) const {
    throw ParseError(path_ + ": " + where + ": " + what);
  }
  const json& field(const json& obj, const std::string& where, const char* key) const {
    if (!obj.is_object()) fail(where, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(where, std::string("missing key \"") + key + "\"");
    return *it;
  }
  double number(const json& obj, const std::string& where, const char* key) const {
    const json& v = field(obj, where, key);
    if (!v.is_number()) fail(where + "." + key, "expected a number");
    return v.get<double>();
  }
  std::string string(const json& obj, const std::string& where, const char* key) const {
    const json& v = field(obj, where, key);
    if (!v.is_string()) fail(where + "." + key, "expected a string");
    return v.get<std::string>();
  }
  std::vector<int> int_list(const json& v, const std::string& where) const {
    if (!v.is_array()) fail(where, "expected an array of integers");
    std::vector<int> out;
    for (const auto& x : v) {
      if (!x.is_number_integer()) fail(where, "expected an array of integers");
      out.push_back(x.get<int>());
    }
    return out;
  }

 private:
  std::string path_;
};

inline std::vector<TimePoint> parse_half(const Locus& L, const json& obj, const std::string& where) {
  const json& t = L.field(obj, where, "t");
  const json& v = L.field(obj, where, "v");
  const json& i = L.field(obj, where, "i");
  if (!t.is_array() || !v.is_array() || !i.is_array()) L.fail(where, "t, v, i must be arrays");
  if (t.size() != v.size() || t.size() != i.size()) {
    L.fail(where, "t, v, i lengths differ (" + std::to_string(t.size()) + ", " +
                      std::to_string(v.size()) + ", " + std::to_string(i.size()) + ")");
  }
  std::vector<TimePoint> pts(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (!t[k].is_number() || !v[k].is_number() || !i[k].is_number()) {
      L.fail(where + "[" + std::to_string(k) + "]", "non-numeric sample");
    }
    pts[k].t = t[k].get<double>();
    pts[k].voltage = v[k].get<double>();
    pts[k].current = i[k].get<double>();
  }
  return pts;
}

}  // namespace detail

/// Canonical serialization: fixed key order, %.9g floats, one cycle per line.
inline std::string serialize_battery(const BatteryRecord& r) {
  std::string out;
  out += "{\"id\":";
  detail::write_string(out, r.id);
  const auto& c = r.condition;
  out += ",\n\"condition\":{\"battery_format\":";
  detail::write_string(out, to_string(c.battery_format));
  out += ",\"anode\":";
  detail::write_string(out, c.anode);
  out += ",\"cathode\":";
  detail::write_string(out, c.cathode);
  out += ",\"electrolyte\":";
  detail::write_string(out, c.electrolyte);
  out += ",\"charge_protocol\":";
  detail::write_string(out, c.charge_protocol);
  out += ",\"discharge_protocol\":";
  detail::write_string(out, c.discharge_protocol);
  out += ",\"temperature\":" + format_float(c.temperature);
  out += ",\"nominal_capacity\":" + format_float(c.nominal_capacity);
  out += ",\"manufacturer\":";
  detail::write_string(out, c.manufacturer);
  out += "},\n\"q0_mode\":\"" + detail::q0_mode_name(r.q0_mode) + "\"";
  out += ",\n\"manual_exclusions\":";
  detail::write_int_list(out, r.manual_exclusions);
  if (!r.formation_cycles.empty()) {
    out += ",\n\"formation_cycles\":";
    detail::write_int_list(out, r.formation_cycles);
  }
  if (!r.rpt_cycles.empty()) {
    out += ",\n\"rpt_cycles\":";
    detail::write_int_list(out, r.rpt_cycles);
  }
  out += ",\n\"cycles\":[";
  for (std::size_t k = 0; k < r.cycles.size(); ++k) {
    const Cycle& cy = r.cycles[k];
    out += k ? ",\n" : "\n";
    out += "{\"index\":" + std::to_string(cy.index) + ",\"charge\":";
    detail::write_half(out, cy.charge_points);
    out += ",\"discharge\":";
    detail::write_half(out, cy.discharge_points);
    out += ",\"discharge_capacity\":" + format_float(cy.discharge_capacity) + "}";
  }
  out += "\n]}\n";
  return out;
}

/// Parses and validates a standardized battery document. `origin` names the
/// source in error messages.
inline BatteryRecord parse_battery(const std::string& text, const std::string& origin = "<memory>") {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Byte offset to line number.
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
    throw ParseError(origin + ": line " + std::to_string(line) + ": " + e.what());
  }
  detail::Locus L(origin);
  static const std::set<std::string> known = {"id",        "condition",        "q0_mode",
                                              "manual_exclusions", "formation_cycles",
                                              "rpt_cycles", "cycles"};
  if (!doc.is_object()) L.fail("<root>", "expected an object");
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) L.fail("<root>", "unknown key \"" + key + "\"");
  }
  BatteryRecord r;
  r.id = L.string(doc, "<root>", "id");
  const json& cond = L.field(doc, "<root>", "condition");
  static const std::set<std::string> cond_keys = {
      "battery_format", "anode", "cathode", "electrolyte", "charge_protocol",
      "discharge_protocol", "temperature", "nominal_capacity", "manufacturer"};
  if (!cond.is_object() || cond.size() != cond_keys.size()) {
    L.fail("condition", "expected exactly the nine aging-factor keys");
  }
  for (const auto& [key, _] : cond.items()) {
    if (!cond_keys.contains(key)) L.fail("condition", "unknown key \"" + key + "\"");
  }
  try {
    r.condition.battery_format = battery_format_from_string(L.string(cond, "condition", "battery_format"));
  } catch (const ParseError& e) {
    L.fail("condition.battery_format", e.what());
  }
  r.condition.anode = L.string(cond, "condition", "anode");
  r.condition.cathode = L.string(cond, "condition", "cathode");
  r.condition.electrolyte = L.string(cond, "condition", "electrolyte");
  r.condition.charge_protocol = L.string(cond, "condition", "charge_protocol");
  r.condition.discharge_protocol = L.string(cond, "condition", "discharge_protocol");
  r.condition.temperature = L.number(cond, "condition", "temperature");
  r.condition.nominal_capacity = L.number(cond, "condition", "nominal_capacity");
  r.condition.manufacturer = L.string(cond, "condition", "manufacturer");

  const std::string mode = L.string(doc, "<root>", "q0_mode");
  if (mode == "nominal") {
    r.q0_mode = Q0Mode::Nominal;
  } else if (mode == "first_cycle") {
    r.q0_mode = Q0Mode::FirstCycle;
  } else {
    L.fail("q0_mode", "expected \"nominal\" or \"first_cycle\"");
  }
  r.manual_exclusions = L.int_list(L.field(doc, "<root>", "manual_exclusions"), "manual_exclusions");
  if (doc.contains("formation_cycles")) r.formation_cycles = L.int_list(doc["formation_cycles"], "formation_cycles");
  if (doc.contains("rpt_cycles")) r.rpt_cycles = L.int_list(doc["rpt_cycles"], "rpt_cycles");

  const json& cycles = L.field(doc, "<root>", "cycles");
  if (!cycles.is_array()) L.fail("cycles", "expected an array");
  r.cycles.reserve(cycles.size());
  for (std::size_t k = 0; k < cycles.size(); ++k) {
    const std::string where = "cycles[" + std::to_string(k) + "]";
    const json& cj = cycles[k];
    Cycle c;
    const json& idx = L.field(cj, where, "index");
    if (!idx.is_number_integer()) L.fail(where + ".index", "expected an integer");
    c.index = idx.get<int>();
    c.charge_points = detail::parse_half(L, L.field(cj, where, "charge"), where + ".charge");
    c.discharge_points = detail::parse_half(L, L.field(cj, where, "discharge"), where + ".discharge");
    c.discharge_capacity = L.number(cj, where, "discharge_capacity");
    try {
      accumulate_capacity(c.charge_points);
      accumulate_capacity(c.discharge_points);
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ": " + where + " (cycle " + std::to_string(c.index) + "): " + e.what());
    }
    r.cycles.push_back(std::move(c));
  }
  try {
    validate_record(r);
  } catch (const ValidationError& e) {
    throw ValidationError(origin + ": " + e.what());
  }
  return r;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline BatteryRecord load_battery(const std::filesystem::path& path) {
  return parse_battery(read_file(path), path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void save_battery(const BatteryRecord& record, const std::filesystem::path& path) {
  validate_record(record);
  write_text_file(path, serialize_battery(record));
}

// ---------------------------------------------------------------------------
// Fleet manifest
// ---------------------------------------------------------------------------

enum class DatasetTag { LiIon, ZnIon, NaIon, CALB, Synthetic };

inline std::string_view to_string(DatasetTag t) {
  switch (t) {
    case DatasetTag::LiIon: return "Li-ion";
    case DatasetTag::ZnIon: return "Zn-ion";
    case DatasetTag::NaIon: return "Na-ion";
    case DatasetTag::CALB: return "CALB";
    case DatasetTag::Synthetic: return "synthetic";
  }
  return "?";
}

inline DatasetTag dataset_tag_from_string(std::string_view s) {
  for (auto t : {DatasetTag::LiIon, DatasetTag::ZnIon, DatasetTag::NaIon, DatasetTag::CALB,
                 DatasetTag::Synthetic}) {
    if (to_string(t) == s) return t;
  }
  throw ParseError("unknown dataset tag '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::filesystem::path path;
  DatasetTag tag = DatasetTag::Synthetic;
};

/// {"batteries": [{"path": "...", "tag": "Li-ion"}, ...]}; relative paths
/// resolve against the manifest's directory.
struct FleetManifest {
  std::vector<ManifestEntry> entries;
};

inline FleetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("batteries") || !doc["batteries"].is_array()) {
    throw ParseError(path.string() + ": expected {\"batteries\": [...]}");
  }
  FleetManifest m;
  const auto base = path.parent_path();
  std::size_t k = 0;
  for (const auto& e : doc["batteries"]) {
    const std::string where = path.string() + ": batteries[" + std::to_string(k++) + "]";
    if (!e.is_object() || !e.contains("path") || !e["path"].is_string() || !e.contains("tag") ||
        !e["tag"].is_string()) {
      throw ParseError(where + ": expected {\"path\": string, \"tag\": string}");
    }
    ManifestEntry entry;
    entry.path = e["path"].get<std::string>();
    if (entry.path.is_relative()) entry.path = base / entry.path;
    try {
      entry.tag = dataset_tag_from_string(e["tag"].get<std::string>());
    } catch (const ParseError& err) {
      throw ParseError(where + ": " + err.what());
    }
    m.entries.push_back(std::move(entry));
  }
  return m;
}

/// Writes the manifest with paths relative to its directory when possible.
inline void save_manifest(const FleetManifest& m, const std::filesystem::path& path) {
  json doc;
  doc["batteries"] = json::array();
  const auto base = path.parent_path();
  for (const auto& e : m.entries) {
    std::filesystem::path p = e.path;
    if (p.is_absolute() || !base.empty()) {
      auto rel = std::filesystem::proximate(p, base.empty() ? "." : base);
      p = rel;
    }
    doc["batteries"].push_back({{"path", p.generic_string()}, {"tag", std::string(to_string(e.tag))}});
  }
  write_text_file(path, doc.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

enum class RemovalReason { MedianOutlier, Formation, RPT, Manual };

inline std::string_view to_string(RemovalReason r) {
  switch (r) {
    case RemovalReason::MedianOutlier: return "median_outlier";
    case RemovalReason::Formation: return "formation";
    case RemovalReason::RPT: return "rpt";
    case RemovalReason::Manual: return "manual";
  }
  return "?";
}

struct CleaningReport {
  std::string battery_id;
  std::vector<int> removed_cycle_indices;  // sorted
  std::map<int, RemovalReason> removal_reasons;

  void add(int index, RemovalReason why) {
    if (removal_reasons.emplace(index, why).second) {
      removed_cycle_indices.insert(
          std::upper_bound(removed_cycle_indices.begin(), removed_cycle_indices.end(), index), index);
    }
  }
};

struct FilterOptions {
  int window = 21;
  double rel_threshold = 0.10;
};

/// Running median with edge replication, window centred on each element.
inline std::vector<double> running_median(std::span<const double> xs, int window) {
  const int n = static_cast<int>(xs.size());
  const int half = window / 2;
  std::vector<double> out(xs.size());
  std::vector<double> buf(static_cast<std::size_t>(window));
  for (int i = 0; i < n; ++i) {
    for (int k = -half; k <= half; ++k) {
      buf[static_cast<std::size_t>(k + half)] = xs[static_cast<std::size_t>(std::clamp(i + k, 0, n - 1))];
    }
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(half)];
  }
  return out;
}

/// Removes cycles whose discharge capacity deviates from the running median
/// by more than rel_threshold (relative). Repeats until no cycle is flagged,
/// so filtering a filtered record is a no-op. Records shorter than the window
/// come back unchanged with an empty report.
inline std::pair<BatteryRecord, CleaningReport> filter_outlier_cycles(const BatteryRecord& record,
                                                                      const FilterOptions& opt = {}) {
  if (opt.window < 3 || opt.window % 2 == 0) {
    throw DomainError("filter_outlier_cycles: window must be odd and >= 3");
  }
  if (!(opt.rel_threshold > 0.0)) throw DomainError("filter_outlier_cycles: threshold must be positive");
  BatteryRecord out = record;
  CleaningReport report{record.id, {}, {}};
  while (static_cast<int>(out.cycles.size()) >= opt.window) {
    std::vector<double> q(out.cycles.size());
    std::transform(out.cycles.begin(), out.cycles.end(), q.begin(),
                   [](const Cycle& c) { return c.discharge_capacity; });
    const auto med = running_median(q, opt.window);
    std::vector<Cycle> kept;
    kept.reserve(out.cycles.size());
    bool removed = false;
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (std::abs(q[k] - med[k]) > opt.rel_threshold * med[k]) {
        report.add(out.cycles[k].index, RemovalReason::MedianOutlier);
        removed = true;
      } else {
        kept.push_back(std::move(out.cycles[k]));
      }
    }
    out.cycles = std::move(kept);
    if (!removed) break;
  }
  return {std::move(out), std::move(report)};
}

/// Drops the formation, RPT and manually excluded cycles listed in the record.
inline std::pair<BatteryRecord, CleaningReport> apply_exclusions(const BatteryRecord& record) {
  CleaningReport report{record.id, {}, {}};
  std::map<int, RemovalReason> drop;
  for (int i : record.formation_cycles) drop.emplace(i, RemovalReason::Formation);
  for (int i : record.rpt_cycles) drop.emplace(i, RemovalReason::RPT);
  for (int i : record.manual_exclusions) drop.emplace(i, RemovalReason::Manual);
  BatteryRecord out = record;
  out.cycles.clear();
  for (const auto& c : record.cycles) {
    auto it = drop.find(c.index);
    if (it == drop.end()) {
      out.cycles.push_back(c);
    } else {
      report.add(c.index, it->second);
    }
  }
  return {std::move(out), std::move(report)};
}

/// Exclusion lists first, then the median filter.
inline std::pair<BatteryRecord, CleaningReport> clean_record(const BatteryRecord& record,
                                                             const FilterOptions& opt = {}) {
  auto [excluded, report] = apply_exclusions(record);
  auto [filtered, median_report] = filter_outlier_cycles(excluded, opt);
  for (int idx : median_report.removed_cycle_indices) report.add(idx, RemovalReason::MedianOutlier);
  return {std::move(filtered), std::move(report)};
}

}  // namespace blp::ingest
