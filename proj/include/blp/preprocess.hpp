#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <optional>
#include <sstream>
#include <variant>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "blp/core.hpp"
#include "blp/ingest.hpp"

namespace blp::prep {

inline constexpr int kHalfPoints = 150;
inline constexpr int kCyclePoints = 2 * kHalfPoints;
inline constexpr int kVariables = 3;
inline constexpr int kMaxCycles = 100;
inline constexpr int kTokenWidth = kVariables * kCyclePoints;  // 900
inline constexpr int kSampleWidth = kMaxCycles * kTokenWidth;   // 90,000

/// One cycle on the fixed 300-point grid: 150 charge points then 150
/// discharge points per channel.
struct ResampledCycle {
  std::array<double, kCyclePoints> capacity{};
  std::array<double, kCyclePoints> voltage{};
  std::array<double, kCyclePoints> current{};

  friend bool operator==(const ResampledCycle&, const ResampledCycle&) = default;
};

namespace detail {

/// Linear interpolation of one half-cycle onto kHalfPoints uniformly spaced
/// times between its first and last timestamp.
inline void resample_half(std::span<const TimePoint> pts, std::size_t offset, ResampledCycle& out) {
  const double t0 = pts.front().t;
  const double span = pts.back().t - t0;
  std::size_t j = 0;
  for (int k = 0; k < kHalfPoints; ++k) {
    const std::size_t dst = offset + static_cast<std::size_t>(k);
    if (k == kHalfPoints - 1) {
      out.capacity[dst] = pts.back().cumulative_capacity;
      out.voltage[dst] = pts.back().voltage;
      out.current[dst] = pts.back().current;
      break;
    }
    // Position along the half-cycle as a fraction, compared in normalized
    // time so that shifting or scaling the clock leaves the result unchanged.
    const double u = static_cast<double>(k) / (kHalfPoints - 1);
    while (j + 2 < pts.size() && (pts[j + 1].t - t0) / span <= u) ++j;
    const double ua = (pts[j].t - t0) / span;
    const double ub = (pts[j + 1].t - t0) / span;
    const double w = std::clamp((u - ua) / (ub - ua), 0.0, 1.0);
    auto lerp = [w](double a, double b) { return a + w * (b - a); };
    out.capacity[dst] = lerp(pts[j].cumulative_capacity, pts[j + 1].cumulative_capacity);
    out.voltage[dst] = lerp(pts[j].voltage, pts[j + 1].voltage);
    out.current[dst] = lerp(pts[j].current, pts[j + 1].current);
  }
}

}  // namespace detail

inline ResampledCycle resample_cycle(const Cycle& cycle) {
  if (cycle.charge_points.size() < 2 || cycle.discharge_points.size() < 2) {
    throw DataError("resample_cycle: cycle " + std::to_string(cycle.index) +
                    " has a half-cycle with fewer than 2 points");
  }
  ResampledCycle rc;
  detail::resample_half(cycle.charge_points, 0, rc);
  detail::resample_half(cycle.discharge_points, kHalfPoints, rc);
  return rc;
}

/// Capacity and current over the nominal capacity; voltage over its maximum
/// across the full 300-point cycle.
inline ResampledCycle normalize_cycle(const ResampledCycle& rc, double q_nominal) {
  if (!(q_nominal > 0.0)) throw DomainError("normalize_cycle: nominal capacity must be positive");
  const double vmax = *std::max_element(rc.voltage.begin(), rc.voltage.end());
  if (!(vmax > 0.0)) throw DataError("normalize_cycle: maximum voltage is not positive");
  ResampledCycle out;
  for (int k = 0; k < kCyclePoints; ++k) {
    out.capacity[k] = rc.capacity[k] / q_nominal;
    out.voltage[k] = rc.voltage[k] / vmax;
    out.current[k] = rc.current[k] / q_nominal;
  }
  return out;
}

/// A model input of logical shape (3 variables, 100 cycles, 300 points),
/// variables ordered (capacity, voltage, current). Slots at and after
/// usable_cycles read as zero.
///
/// Storage is token-major (cycle, variable, point) and may be shared between
/// samples of the same battery that differ only in usable_cycles. Writing
/// through set() detaches into a private dense buffer in which the padding
/// slots are explicit.
class SampleTensor {
 public:
  using Storage = std::vector<float>;

  SampleTensor() = default;

  SampleTensor(std::string battery_id, AgingCondition condition, int usable_cycles, int label,
               std::shared_ptr<const Storage> storage)
      : battery_id_(std::move(battery_id)),
        condition_(std::move(condition)),
        usable_cycles_(usable_cycles),
        label_(label),
        storage_(std::move(storage)) {
    if (usable_cycles_ < 1 || usable_cycles_ > kMaxCycles) {
      throw DomainError("SampleTensor: usable cycles must lie in [1, 100]");
    }
    if (!storage_ || storage_->size() < static_cast<std::size_t>(usable_cycles_) * kTokenWidth) {
      throw ShapeError("SampleTensor: storage holds fewer than usable_cycles tokens");
    }
  }

  const std::string& battery_id() const { return battery_id_; }
  const AgingCondition& condition() const { return condition_; }
  void set_condition(AgingCondition c) { condition_ = std::move(c); }
  int usable_cycles() const { return usable_cycles_; }
  int label() const { return label_; }

  /// Flattened cycle token (900 values), for cycle < usable_cycles.
  std::span<const float> token(int cycle) const {
    return {storage_->data() + static_cast<std::size_t>(cycle) * kTokenWidth,
            static_cast<std::size_t>(kTokenWidth)};
  }

  float at(int variable, int cycle, int point) const {
    if (cycle >= usable_cycles_ && !dense_) return 0.0f;
    return (*storage_)[offset(variable, cycle, point)];
  }

  void set(int variable, int cycle, int point, float value) {
    detach();
    (*owned_)[offset(variable, cycle, point)] = value;
  }

  /// Full (3, 100, 300) tensor in variable-major order, 90,000 values.
  std::vector<float> dense() const {
    std::vector<float> out(static_cast<std::size_t>(kSampleWidth), 0.0f);
    for (int v = 0; v < kVariables; ++v)
      for (int c = 0; c < kMaxCycles; ++c)
        for (int p = 0; p < kCyclePoints; ++p)
          out[(static_cast<std::size_t>(v) * kMaxCycles + c) * kCyclePoints + p] = at(v, c, p);
    return out;
  }

  /// The same sample as the model sees it through the flat (3*T) layout:
  /// cycle-major, which is what the flattened-input baseline consumes.
  void flat_cycle_major(std::span<double> out) const {
    for (int c = 0; c < kMaxCycles; ++c)
      for (int v = 0; v < kVariables; ++v)
        for (int p = 0; p < kCyclePoints; ++p)
          out[static_cast<std::size_t>(c) * kTokenWidth + v * kCyclePoints + p] = at(v, c, p);
  }

 private:
  static std::size_t offset(int variable, int cycle, int point) {
    return static_cast<std::size_t>(cycle) * kTokenWidth +
           static_cast<std::size_t>(variable) * kCyclePoints + static_cast<std::size_t>(point);
  }

  void detach() {
    if (dense_) return;
    auto buf = std::make_shared<Storage>(static_cast<std::size_t>(kSampleWidth), 0.0f);
    std::copy_n(storage_->begin(), static_cast<std::size_t>(usable_cycles_) * kTokenWidth, buf->begin());
    owned_ = buf;
    storage_ = buf;
    dense_ = true;
  }

  std::string battery_id_;
  AgingCondition condition_;
  int usable_cycles_ = 0;
  int label_ = 0;
  std::shared_ptr<const Storage> storage_;
  std::shared_ptr<Storage> owned_;
  bool dense_ = false;
};

/// Token-major normalized storage for the first `cycles` cycles.
inline std::shared_ptr<const SampleTensor::Storage> build_storage(const BatteryRecord& record, int cycles) {
  auto buf = std::make_shared<SampleTensor::Storage>(static_cast<std::size_t>(cycles) * kTokenWidth);
  for (int c = 0; c < cycles; ++c) {
    const ResampledCycle rc =
        normalize_cycle(resample_cycle(record.cycles[static_cast<std::size_t>(c)]),
                        record.condition.nominal_capacity);
    float* dst = buf->data() + static_cast<std::size_t>(c) * kTokenWidth;
    for (int p = 0; p < kCyclePoints; ++p) {
      dst[p] = static_cast<float>(rc.capacity[p]);
      dst[kCyclePoints + p] = static_cast<float>(rc.voltage[p]);
      dst[2 * kCyclePoints + p] = static_cast<float>(rc.current[p]);
    }
  }
  return buf;
}

/// First S cycles of a cleaned, labeled record as a padded sample.
inline SampleTensor build_sample(const BatteryRecord& record, int usable_cycles) {
  if (usable_cycles < 1 || usable_cycles > kMaxCycles) {
    throw DomainError("build_sample: usable cycles must lie in [1, 100], got " +
                      std::to_string(usable_cycles));
  }
  if (usable_cycles > static_cast<int>(record.cycles.size())) {
    throw DataError("build_sample: " + record.id + " has " + std::to_string(record.cycles.size()) +
                    " cycles, fewer than S = " + std::to_string(usable_cycles));
  }
  if (!record.life_label) throw DataError("build_sample: " + record.id + " has no life label");
  if (*record.life_label <= usable_cycles) {
    throw DataError("build_sample: " + record.id + " label " + std::to_string(*record.life_label) +
                    " does not exceed S = " + std::to_string(usable_cycles));
  }
  return SampleTensor(record.id, record.condition, usable_cycles, *record.life_label,
                      build_storage(record, usable_cycles));
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

struct DatasetOptions {
  std::vector<int> s_values;
  /// Threshold for ordinary records; CALB-tagged records use calb_lambda.
  double lambda = 0.80;
  double calb_lambda = 0.90;
  ingest::FilterOptions filter{};
  std::optional<Q0Mode> q0_override;
  int jobs = 1;
};

struct SkipEntry {
  std::string battery_id;
  std::string reason;
};

struct Dataset {
  std::vector<SampleTensor> samples;
  std::vector<SkipEntry> skipped;
  std::vector<ingest::CleaningReport> cleaning;
};

/// A labeled, cleaned battery ready for sample extraction.
struct PreparedBattery {
  BatteryRecord record;  // cleaned, life_label filled
  ingest::DatasetTag tag = ingest::DatasetTag::Synthetic;
  std::shared_ptr<const SampleTensor::Storage> storage;  // first min(100, n) cycles
};

inline double lambda_for(ingest::DatasetTag tag, const DatasetOptions& opt) {
  return tag == ingest::DatasetTag::CALB ? opt.calb_lambda : opt.lambda;
}

/// Cleans one record and derives its label. Returns the skip reason instead
/// of a battery when the record cannot be labeled.
inline std::variant<PreparedBattery, SkipEntry> prepare_battery(const BatteryRecord& raw, ingest::DatasetTag tag,
                                                                const DatasetOptions& opt,
                                                                ingest::CleaningReport* report = nullptr) {
  BatteryRecord input = raw;
  if (opt.q0_override) input.q0_mode = *opt.q0_override;
  if (tag == ingest::DatasetTag::CALB && !opt.q0_override) input.q0_mode = Q0Mode::FirstCycle;
  auto [clean, rep] = ingest::clean_record(input, opt.filter);
  if (report) *report = rep;
  if (clean.cycles.empty()) return SkipEntry{raw.id, "no cycles after cleaning"};
  LifeLabel label;
  try {
    label = derive_life_label(soh_trajectory(clean), LabelRules{lambda_for(tag, opt)});
  } catch (const Error& e) {
    return SkipEntry{raw.id, e.what()};
  }
  if (label.status != LabelStatus::Label) {
    std::string why(to_string(label.status));
    if (label.status == LabelStatus::ExcludedShortLife) why += " (life " + std::to_string(label.cycle) + ")";
    return SkipEntry{raw.id, why};
  }
  clean.life_label = label.cycle;
  PreparedBattery pb;
  const int n = std::min<int>(kMaxCycles, static_cast<int>(clean.cycles.size()));
  try {
    pb.storage = build_storage(clean, n);
  } catch (const Error& e) {
    return SkipEntry{raw.id, e.what()};
  }
  pb.record = std::move(clean);
  pb.tag = tag;
  return pb;
}

/// Samples for every labeled battery and every S with S < label and S no
/// larger than the available cycles, in battery order then ascending S.
inline std::vector<SampleTensor> samples_for(const PreparedBattery& b, const std::vector<int>& s_values) {
  std::set<int> sorted(s_values.begin(), s_values.end());
  std::vector<SampleTensor> out;
  const int available = static_cast<int>(b.storage->size() / kTokenWidth);
  for (int s : sorted) {
    if (s > available || s >= *b.record.life_label) continue;
    out.emplace_back(b.record.id, b.record.condition, s, *b.record.life_label, b.storage);
  }
  return out;
}

inline void check_s_values(const std::vector<int>& s_values) {
  if (s_values.empty()) throw ConfigError("make_dataset: S_values is empty");
  for (int s : s_values) {
    if (s < 1 || s > kMaxCycles) throw ConfigError("make_dataset: S value " + std::to_string(s) + " outside [1, 100]");
  }
}

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// In-memory variant of make_dataset over already-loaded records.
inline Dataset make_dataset(const std::vector<std::pair<BatteryRecord, ingest::DatasetTag>>& fleet,
                            const DatasetOptions& opt) {
  check_s_values(opt.s_values);
  std::vector<std::variant<PreparedBattery, SkipEntry>> prepared(fleet.size());
  std::vector<ingest::CleaningReport> reports(fleet.size());
  parallel_for(fleet.size(), opt.jobs, [&](std::size_t i) {
    prepared[i] = prepare_battery(fleet[i].first, fleet[i].second, opt, &reports[i]);
  });
  Dataset ds;
  ds.cleaning = std::move(reports);
  for (auto& p : prepared) {
    if (auto* skip = std::get_if<SkipEntry>(&p)) {
      ds.skipped.push_back(*skip);
      continue;
    }
    auto samples = samples_for(std::get<PreparedBattery>(p), opt.s_values);
    for (auto& s : samples) ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw ConfigError("make_dataset: no samples survive the labeling rules");
  return ds;
}

inline Dataset make_dataset(const ingest::FleetManifest& manifest, const DatasetOptions& opt) {
  check_s_values(opt.s_values);
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> fleet(manifest.entries.size());
  parallel_for(manifest.entries.size(), opt.jobs, [&](std::size_t i) {
    fleet[i] = {ingest::load_battery(manifest.entries[i].path), manifest.entries[i].tag};
  });
  return make_dataset(fleet, opt);
}

// ---------------------------------------------------------------------------
// Binary sample cache
//
// Little-endian: "BLPT", u32 version, u32 n_samples, then per sample
// {u32 id length, id bytes, u16 S, u32 label, 3*100*300 f32 in
// (variable, cycle, point) order}.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw ParseError(origin + ": truncated at byte " + std::to_string(pos));
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline std::string encode_cache(std::span<const SampleTensor> samples) {
  std::string out = "BLPT";
  detail::put_le<std::uint32_t>(out, kCacheVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.battery_id().size()));
    out += s.battery_id();
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.usable_cycles()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.label()));
    for (float x : s.dense()) detail::put_le<float>(out, x);
  }
  return out;
}

inline std::vector<SampleTensor> decode_cache(std::string_view bytes, const std::string& origin = "<cache>") {
  if (bytes.substr(0, 4) != "BLPT") throw ParseError(origin + ": bad magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos, origin);
  if (version != kCacheVersion) throw ParseError(origin + ": unsupported version " + std::to_string(version));
  const auto n = detail::get_le<std::uint32_t>(bytes, pos, origin);
  std::vector<SampleTensor> out;
  out.reserve(n);
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = detail::get_le<std::uint32_t>(bytes, pos, origin);
    if (pos + len > bytes.size()) throw ParseError(origin + ": truncated id in sample " + std::to_string(k));
    std::string id(bytes.substr(pos, len));
    pos += len;
    const int s = detail::get_le<std::uint16_t>(bytes, pos, origin);
    const int label = static_cast<int>(detail::get_le<std::uint32_t>(bytes, pos, origin));
    auto storage = std::make_shared<SampleTensor::Storage>(static_cast<std::size_t>(kSampleWidth));
    for (int v = 0; v < kVariables; ++v)
      for (int c = 0; c < kMaxCycles; ++c)
        for (int p = 0; p < kCyclePoints; ++p)
          (*storage)[static_cast<std::size_t>(c) * kTokenWidth + v * kCyclePoints + p] =
              detail::get_le<float>(bytes, pos, origin);
    out.emplace_back(std::move(id), AgingCondition{}, s, label, std::move(storage));
  }
  if (pos != bytes.size()) throw ParseError(origin + ": trailing bytes after sample " + std::to_string(n));
  return out;
}

/// Aging conditions of the cached samples, keyed by battery id. The binary
/// cache has no room for them, so they travel in a JSON file beside it.
inline nlohmann::json conditions_json(std::span<const SampleTensor> samples) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& s : samples) {
    const auto& c = s.condition();
    out[s.battery_id()] = {{"battery_format", std::string(to_string(c.battery_format))},
                           {"anode", c.anode},
                           {"cathode", c.cathode},
                           {"electrolyte", c.electrolyte},
                           {"charge_protocol", c.charge_protocol},
                           {"discharge_protocol", c.discharge_protocol},
                           {"temperature", c.temperature},
                           {"nominal_capacity", c.nominal_capacity},
                           {"manufacturer", c.manufacturer}};
  }
  return out;
}

inline void attach_conditions(std::vector<SampleTensor>& samples, const nlohmann::json& doc,
                              const std::string& origin = "<conditions>") {
  for (auto& s : samples) {
    if (!doc.contains(s.battery_id())) throw ParseError(origin + ": no condition for battery " + s.battery_id());
    const auto& j = doc.at(s.battery_id());
    try {
      AgingCondition c;
      c.battery_format = battery_format_from_string(j.at("battery_format").get<std::string>());
      c.anode = j.at("anode").get<std::string>();
      c.cathode = j.at("cathode").get<std::string>();
      c.electrolyte = j.at("electrolyte").get<std::string>();
      c.charge_protocol = j.at("charge_protocol").get<std::string>();
      c.discharge_protocol = j.at("discharge_protocol").get<std::string>();
      c.temperature = j.at("temperature").get<double>();
      c.nominal_capacity = j.at("nominal_capacity").get<double>();
      c.manufacturer = j.at("manufacturer").get<std::string>();
      s.set_condition(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ": battery " + s.battery_id() + ": " + e.what());
    }
  }
}

inline std::filesystem::path conditions_path(const std::filesystem::path& cache) {
  return std::filesystem::path(cache.string() + ".conditions.json");
}

inline void save_cache(std::span<const SampleTensor> samples, const std::filesystem::path& path) {
  ingest::write_text_file(path, encode_cache(samples));
  ingest::write_text_file(conditions_path(path), conditions_json(samples).dump(1) + "\n");
}

/// Loads a cache; conditions are attached when the side file exists.
inline std::vector<SampleTensor> load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open cache " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto samples = decode_cache(ss.str(), path.string());
  const auto side = conditions_path(path);
  if (std::filesystem::exists(side)) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(ingest::read_file(side));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(side.string() + ": " + e.what());
    }
    attach_conditions(samples, doc, side.string());
  }
  return samples;
}

}  // namespace blp::prep
