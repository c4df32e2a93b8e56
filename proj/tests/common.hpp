#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "blp/core.hpp"
#include "blp/preprocess.hpp"
#include "blp/synth.hpp"

namespace blp::testing {

/// A half-cycle at constant |current| sampled at n points over `seconds`,
/// voltage ramping linearly from v0 to v1.
inline std::vector<TimePoint> half_cycle(int n, double seconds, double current, double v0, double v1) {
  std::vector<TimePoint> pts(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double f = n == 1 ? 0.0 : static_cast<double>(k) / (n - 1);
    pts[k].t = f * seconds;
    pts[k].voltage = v0 + (v1 - v0) * f;
    pts[k].current = current;
  }
  accumulate_capacity(pts);
  return pts;
}

/// A valid cycle whose discharge capacity is q (1 h at q amps).
inline Cycle simple_cycle(int index, double q, int points = 8) {
  Cycle c;
  c.index = index;
  c.charge_points = half_cycle(points, 3600.0, q, 3.0, 4.2);
  c.discharge_points = half_cycle(points, 3600.0, -q, 4.1, 2.8);
  c.discharge_capacity = integrate_capacity(c.discharge_points);
  return c;
}

inline BatteryRecord simple_record(const std::string& id, const std::vector<double>& capacities,
                                   double nominal = 1.0) {
  BatteryRecord r;
  r.id = id;
  r.condition.nominal_capacity = nominal;
  r.condition.anode = "graphite";
  r.condition.cathode = "lfp";
  for (std::size_t k = 0; k < capacities.size(); ++k) r.cycles.push_back(simple_cycle(static_cast<int>(k + 1), capacities[k]));
  return r;
}

/// Linear fade from 1.0 by `rate` per cycle over n cycles.
inline std::vector<double> linear_fade(int n, double rate) {
  std::vector<double> q(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) q[k] = 1.0 - rate * (k + 1);
  return q;
}

inline synth::SynthConfig noiseless(int n, std::uint64_t seed) {
  auto cfg = synth::default_config();
  cfg.n_batteries = n;
  cfg.seed = seed;
  cfg.noise = {0.0, 0.0, 0.0};
  return cfg;
}

inline std::vector<prep::SampleTensor> fleet_samples(const synth::SynthConfig& cfg, std::vector<int> s_values) {
  const auto fleet = synth::generate_fleet(cfg);
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> tagged;
  for (const auto& r : fleet.records) tagged.emplace_back(r, ingest::DatasetTag::Synthetic);
  prep::DatasetOptions opt;
  opt.s_values = std::move(s_values);
  return prep::make_dataset(tagged, opt).samples;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("blp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace blp::testing
