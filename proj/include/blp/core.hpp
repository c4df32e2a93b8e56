#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "blp/errors.hpp"

namespace blp {

/// One logger sample. Current is positive while charging and negative while
/// discharging. cumulative_capacity is the running integral of |I| dt in Ah
/// and restarts at the beginning of each half-cycle.
struct TimePoint {
  double t = 0.0;
  double voltage = 0.0;
  double current = 0.0;
  double cumulative_capacity = 0.0;

  friend bool operator==(const TimePoint&, const TimePoint&) = default;
};

struct Cycle {
  int index = 0;
  std::vector<TimePoint> charge_points;
  std::vector<TimePoint> discharge_points;
  double discharge_capacity = 0.0;

  friend bool operator==(const Cycle&, const Cycle&) = default;
};

enum class BatteryFormat { Cylindrical, Pouch, Prismatic, Coin, Polymer, Other };

inline std::string_view to_string(BatteryFormat f) {
  switch (f) {
    case BatteryFormat::Cylindrical: return "cylindrical";
    case BatteryFormat::Pouch: return "pouch";
    case BatteryFormat::Prismatic: return "prismatic";
    case BatteryFormat::Coin: return "coin";
    case BatteryFormat::Polymer: return "polymer";
    case BatteryFormat::Other: return "other";
  }
  return "other";
}

inline BatteryFormat battery_format_from_string(std::string_view s) {
  for (auto f : {BatteryFormat::Cylindrical, BatteryFormat::Pouch, BatteryFormat::Prismatic,
                 BatteryFormat::Coin, BatteryFormat::Polymer, BatteryFormat::Other}) {
    if (to_string(f) == s) return f;
  }
  throw ParseError("unknown battery format '" + std::string(s) + "'");
}

/// The nine aging factors. Two batteries share an aging condition only when
/// every field compares equal.
struct AgingCondition {
  BatteryFormat battery_format = BatteryFormat::Other;
  std::string anode;
  std::string cathode;
  std::string electrolyte;
  std::string charge_protocol;
  std::string discharge_protocol;
  double temperature = 25.0;
  double nominal_capacity = 1.0;
  std::string manufacturer;

  friend bool operator==(const AgingCondition&, const AgingCondition&) = default;

  auto tie() const {
    return std::tie(battery_format, anode, cathode, electrolyte, charge_protocol,
                    discharge_protocol, temperature, nominal_capacity, manufacturer);
  }
  friend bool operator<(const AgingCondition& a, const AgingCondition& b) {
    return a.tie() < b.tie();
  }

  /// Compact human-readable key, used as the condition label in reports.
  std::string key() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%gC|%gAh", temperature, nominal_capacity);
    return std::string(to_string(battery_format)) + "|" + anode + "|" + cathode + "|" +
           electrolyte + "|" + charge_protocol + "|" + discharge_protocol + "|" + buf + "|" +
           manufacturer;
  }
};

enum class Q0Mode { Nominal, FirstCycle };

struct BatteryRecord {
  std::string id;
  AgingCondition condition;
  std::vector<Cycle> cycles;
  Q0Mode q0_mode = Q0Mode::Nominal;
  std::optional<int> life_label;
  std::vector<int> manual_exclusions;
  std::vector<int> formation_cycles;
  std::vector<int> rpt_cycles;

  friend bool operator==(const BatteryRecord&, const BatteryRecord&) = default;
};

struct SohPoint {
  int cycle = 0;
  double soh = 0.0;

  friend bool operator==(const SohPoint&, const SohPoint&) = default;
};

/// (cycle index, SOH) pairs with strictly increasing cycle indices.
using SohTrajectory = std::vector<SohPoint>;

inline constexpr double kSecondsPerHour = 3600.0;

/// Trapezoidal integral of |I| dt over the points, in amp-hours.
inline double integrate_capacity(std::span<const TimePoint> points) {
  if (points.empty()) throw ValidationError("integrate_capacity: empty point sequence");
  double amp_seconds = 0.0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    const double dt = points[k].t - points[k - 1].t;
    if (!(dt > 0.0)) {
      throw ValidationError("integrate_capacity: timestamp at index " + std::to_string(k) +
                            " is not strictly increasing");
    }
    amp_seconds += 0.5 * (std::abs(points[k - 1].current) + std::abs(points[k].current)) * dt;
  }
  return amp_seconds / kSecondsPerHour;
}

/// Fills cumulative_capacity with the running trapezoidal integral, starting
/// at zero on the first point.
inline void accumulate_capacity(std::span<TimePoint> points) {
  double amp_seconds = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    if (k > 0) {
      const double dt = points[k].t - points[k - 1].t;
      if (!(dt > 0.0)) {
        throw ValidationError("timestamp at index " + std::to_string(k) +
                              " is not strictly increasing");
      }
      amp_seconds += 0.5 * (std::abs(points[k - 1].current) + std::abs(points[k].current)) * dt;
    }
    points[k].cumulative_capacity = amp_seconds / kSecondsPerHour;
  }
}

inline double compute_soh(double q_i, double q_0) {
  if (!(q_0 > 0.0)) throw DomainError("compute_soh: reference capacity must be positive");
  return q_i / q_0;
}

/// Checks the per-cycle invariants: both halves nonempty, strictly increasing
/// time, nondecreasing cumulative capacity, and a stored discharge capacity
/// consistent with the integral of the discharge half.
inline void validate_cycle(const Cycle& c, double rel_tol = 1e-6) {
  const std::string where = "cycle " + std::to_string(c.index);
  if (c.index < 1) throw ValidationError(where + ": index must be positive");
  if (c.charge_points.empty() || c.discharge_points.empty()) {
    throw ValidationError(where + ": charge and discharge segments must be nonempty");
  }
  for (const auto* half : {&c.charge_points, &c.discharge_points}) {
    for (std::size_t k = 1; k < half->size(); ++k) {
      if (!((*half)[k].t > (*half)[k - 1].t)) {
        throw ValidationError(where + ": timestamp at index " + std::to_string(k) +
                              " is not strictly increasing");
      }
      if ((*half)[k].cumulative_capacity < (*half)[k - 1].cumulative_capacity) {
        throw ValidationError(where + ": cumulative capacity decreases at index " +
                              std::to_string(k));
      }
    }
  }
  const double q = integrate_capacity(c.discharge_points);
  const double scale = std::max(std::abs(q), std::abs(c.discharge_capacity));
  if (std::abs(q - c.discharge_capacity) > rel_tol * scale) {
    throw ValidationError(where + ": discharge_capacity " + std::to_string(c.discharge_capacity) +
                          " disagrees with integrated capacity " + std::to_string(q));
  }
}

/// Cycles sorted by index with no duplicates, each cycle valid.
inline void validate_record(const BatteryRecord& r) {
  if (r.id.empty()) throw ValidationError("battery id must be nonempty");
  if (!(r.condition.nominal_capacity > 0.0)) {
    throw ValidationError(r.id + ": nominal capacity must be positive");
  }
  for (std::size_t k = 0; k < r.cycles.size(); ++k) {
    if (k > 0 && r.cycles[k].index <= r.cycles[k - 1].index) {
      throw ValidationError(r.id + ": cycle index " + std::to_string(r.cycles[k].index) +
                            (r.cycles[k].index == r.cycles[k - 1].index ? " is duplicated"
                                                                        : " is out of order"));
    }
    validate_cycle(r.cycles[k]);
  }
  if (r.life_label && *r.life_label <= 100) {
    throw ValidationError(r.id + ": life label must exceed 100");
  }
}

/// Reference capacity Q0 for SOH: the nominal capacity, or the first
/// remaining cycle's discharge capacity in FirstCycle mode.
inline double reference_capacity(const BatteryRecord& r) {
  if (r.q0_mode == Q0Mode::Nominal) return r.condition.nominal_capacity;
  if (r.cycles.empty()) throw DataError(r.id + ": no cycles to take Q1 from");
  return r.cycles.front().discharge_capacity;
}

/// SOH trajectory from discharge capacities.
inline SohTrajectory soh_trajectory(const BatteryRecord& r) {
  const double q0 = reference_capacity(r);
  SohTrajectory traj;
  traj.reserve(r.cycles.size());
  for (const auto& c : r.cycles) {
    const double soh = compute_soh(c.discharge_capacity, q0);
    if (!(soh > 0.0) || soh > 1.5) {
      throw ValidationError(r.id + ": SOH " + std::to_string(soh) + " at cycle " +
                            std::to_string(c.index) + " outside (0, 1.5]");
    }
    traj.push_back({c.index, soh});
  }
  return traj;
}

enum class LabelStatus { Label, ExcludedAboveBand, ExcludedShortLife };

inline std::string_view to_string(LabelStatus s) {
  switch (s) {
    case LabelStatus::Label: return "label";
    case LabelStatus::ExcludedAboveBand: return "excluded_above_band";
    case LabelStatus::ExcludedShortLife: return "excluded_short_life";
  }
  return "?";
}

struct LifeLabel {
  LabelStatus status = LabelStatus::Label;
  /// Life in cycles; also filled for ExcludedShortLife so callers can log it.
  int cycle = 0;
  bool extrapolated = false;

  friend bool operator==(const LifeLabel&, const LifeLabel&) = default;
};

struct LabelRules {
  double lambda = 0.80;
  /// Width of the extrapolation band above lambda.
  double band = 0.025;
  /// Labels at or below this are too short-lived to predict from 100 cycles.
  int min_life = 100;
};

/// Rounds up, ignoring representation error of order 1e-9 relative.
inline int ceil_cycle(double x) {
  return static_cast<int>(std::ceil(x - 1e-9 * std::max(1.0, std::abs(x))));
}

/// End of life: the first cycle whose SOH is no larger than lambda. Without a
/// crossing, a final SOH inside (lambda, lambda + band] is extrapolated along
/// the line through the last two points; anything higher is excluded.
inline LifeLabel derive_life_label(const SohTrajectory& traj, const LabelRules& rules = {}) {
  if (traj.empty()) throw DomainError("derive_life_label: empty trajectory");
  if (!(rules.lambda > 0.0 && rules.lambda < 1.0)) {
    throw DomainError("derive_life_label: lambda must lie in (0, 1)");
  }
  LifeLabel out;
  auto crossing = std::find_if(traj.begin(), traj.end(),
                               [&](const SohPoint& p) { return p.soh <= rules.lambda; });
  if (crossing != traj.end()) {
    out.cycle = crossing->cycle;
  } else {
    const SohPoint& last = traj.back();
    if (last.soh > rules.lambda + rules.band) {
      out.status = LabelStatus::ExcludedAboveBand;
      return out;
    }
    if (traj.size() < 2) {
      throw DomainError("derive_life_label: extrapolation needs two trajectory points");
    }
    const SohPoint& prev = traj[traj.size() - 2];
    const double drop = prev.soh - last.soh;
    if (!(drop > 0.0)) {
      throw DomainError("derive_life_label: trajectory tail is not decreasing, cannot extrapolate");
    }
    const double cycles_to_go = (last.soh - rules.lambda) / drop * (last.cycle - prev.cycle);
    out.cycle = ceil_cycle(last.cycle + cycles_to_go);
    out.extrapolated = true;
  }
  if (out.cycle <= rules.min_life) out.status = LabelStatus::ExcludedShortLife;
  return out;
}

}  // namespace blp
