#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <span>
#include <thread>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blp/core.hpp"
#include "blp/ingest.hpp"
#include "blp/random.hpp"

namespace blp::synth {

/// Cell family: voltage window, nominal capacity and discharge curve shape.
struct Archetype {
  std::string name;
  std::string anode;
  std::string cathode;
  std::string electrolyte;
  BatteryFormat format = BatteryFormat::Cylindrical;
  double v_min = 2.7;
  double v_max = 4.2;
  double nominal_capacity = 2.5;
  /// Logistic discharge curve: midpoint in depth of discharge and width.
  double midpoint = 0.85;
  double width = 0.06;
  /// Fade-rate multiplier.
  double fade = 1.0;
};

struct Protocol {
  double charge_rate = 1.0;  // C
  double cv_fraction = 0.1;  // share of charge capacity delivered at constant voltage
  double discharge_rate = 1.0;
};

enum class KneeShape { Quadratic, Exponential };

struct FadeParams {
  double a = 0.0;       // linear fade per cycle
  double b = 0.0;       // knee sharpness
  double n_knee = 0.0;  // knee onset
  KneeShape shape = KneeShape::Quadratic;
  double tau = 50.0;    // exponential knee time scale, cycles
};

inline constexpr double kSohFloor = 0.5;

/// SOH(n) = 1 - a n - b max(0, n - n_knee)^2, clamped below at 0.5. The
/// exponential shape replaces the square by 2 b tau^2 (exp(d / tau) - 1 - d / tau),
/// which has the same curvature at the onset.
inline double soh_model(const FadeParams& p, double n) {
  const double d = std::max(0.0, n - p.n_knee);
  double knee = 0.0;
  if (p.shape == KneeShape::Quadratic) {
    knee = p.b * d * d;
  } else {
    const double x = d / p.tau;
    knee = 2.0 * p.b * p.tau * p.tau * (std::expm1(x) - x);
  }
  return std::max(kSohFloor, 1.0 - p.a * n - knee);
}

/// First cycle with soh_model <= lambda, or nullopt when none occurs by max_cycle.
inline std::optional<int> analytic_life(const FadeParams& p, double lambda, int max_cycle) {
  for (int n = 1; n <= max_cycle; ++n)
    if (soh_model(p, n) <= lambda) return n;
  return std::nullopt;
}

struct Noise {
  double voltage = 0.0;   // V, standard deviation
  double capacity = 0.0;  // relative, per cycle
  double jitter = 0.0;    // sample-time jitter as a fraction of the nominal step, < 0.5
};

struct SynthConfig {
  int n_batteries = 50;
  std::uint64_t seed = 0;
  std::vector<Archetype> archetypes;
  std::vector<Protocol> protocols;
  std::vector<double> temperatures{25.0};
  /// Linear-fade life 0.2 / a is drawn log-uniformly from this range.
  double life_min = 200.0;
  double life_max = 900.0;
  /// Knee onset as a fraction of the linear-fade life.
  double knee_min = 0.60;
  double knee_max = 0.85;
  /// Knee sharpness b = gamma a^2 / 0.2 with gamma drawn from this range.
  double sharp_min = 0.5;
  double sharp_max = 2.0;
  KneeShape shape = KneeShape::Quadratic;
  int max_cycles = 3000;
  /// Cycles recorded past the end of life.
  int tail_cycles = 10;
  /// Points per half-cycle for cycles 1..100 and for later cycles.
  int detail_points = 40;
  int coarse_points = 6;
  Noise noise{0.005, 0.0005, 0.0};
  /// Relative spread of the first-cycle capacity around nominal.
  double capacity_spread = 0.0;
  /// Share of batteries whose record stops short of end of life, ending with
  /// an SOH inside or above the extrapolation band.
  double truncate_fraction = 0.0;
  /// Probability that a cycle past 100 gets a corrupted capacity reading.
  double outlier_rate = 0.0;
  double lambda = 0.8;
  double band = 0.025;

  void validate() const {
    if (n_batteries < 1) throw ConfigError("synth: n_batteries must be >= 1");
    if (archetypes.empty() || protocols.empty() || temperatures.empty()) {
      throw ConfigError("synth: archetype, protocol and temperature sets must be nonempty");
    }
    for (const auto& a : archetypes) {
      if (!(a.v_min < a.v_max)) throw ConfigError("synth: archetype '" + a.name + "' needs v_min < v_max");
      if (!(a.nominal_capacity > 0.0)) throw ConfigError("synth: archetype '" + a.name + "' needs positive capacity");
      if (!(a.width > 0.0) || !(a.fade > 0.0)) throw ConfigError("synth: archetype '" + a.name + "' shape invalid");
    }
    for (const auto& p : protocols) {
      if (!(p.charge_rate > 0.0) || !(p.discharge_rate > 0.0) || p.cv_fraction < 0.0 || p.cv_fraction >= 1.0) {
        throw ConfigError("synth: protocol rates must be positive and cv_fraction in [0, 1)");
      }
    }
    if (!(life_min > 0.0 && life_min <= life_max)) throw ConfigError("synth: need 0 < life_min <= life_max");
    if (!(knee_min > 0.0 && knee_min <= knee_max)) throw ConfigError("synth: need 0 < knee_min <= knee_max");
    if (!(sharp_min >= 0.0 && sharp_min <= sharp_max)) throw ConfigError("synth: need 0 <= sharp_min <= sharp_max");
    if (max_cycles < 101) throw ConfigError("synth: max_cycles must exceed 100");
    if (detail_points < 2 || coarse_points < 2) throw ConfigError("synth: need at least 2 points per half-cycle");
    if (noise.voltage < 0.0 || noise.capacity < 0.0 || noise.jitter < 0.0 || noise.jitter >= 0.5) {
      throw ConfigError("synth: noise levels must be >= 0 and jitter < 0.5");
    }
    if (capacity_spread < 0.0 || capacity_spread >= 0.1) throw ConfigError("synth: capacity_spread must lie in [0, 0.1)");
    if (truncate_fraction < 0.0 || truncate_fraction > 1.0) throw ConfigError("synth: truncate_fraction must lie in [0, 1]");
    if (outlier_rate < 0.0 || outlier_rate > 0.05) throw ConfigError("synth: outlier_rate must lie in [0, 0.05]");
  }
};

inline std::vector<Archetype> default_archetypes() {
  return {
      {"lfp", "graphite", "LFP", "carbonate", BatteryFormat::Cylindrical, 2.0, 3.6, 1.1, 0.90, 0.035, 0.8},
      {"nmc", "graphite", "NMC", "carbonate", BatteryFormat::Cylindrical, 2.7, 4.2, 2.5, 0.80, 0.07, 1.0},
      {"lco", "graphite", "LCO", "carbonate", BatteryFormat::Pouch, 3.0, 4.35, 3.0, 0.75, 0.09, 1.2},
  };
}

inline std::vector<Protocol> default_protocols() {
  return {{0.5, 0.1, 1.0}, {1.0, 0.1, 1.0}, {1.0, 0.0, 2.0}, {2.0, 0.15, 1.0}};
}

inline SynthConfig default_config() {
  SynthConfig c;
  c.archetypes = default_archetypes();
  c.protocols = default_protocols();
  c.temperatures = {25.0, 35.0, 45.0};
  return c;
}

/// Expected labeling outcome for a generated record.
struct TruthRow {
  std::string id;
  std::optional<int> true_life;  // analytic first crossing; none when censored
  FadeParams fade;
  LifeLabel expected;            // what label derivation yields on the noiseless record
  int last_cycle = 0;
  bool truncated = false;
};

struct Fleet {
  std::vector<BatteryRecord> records;
  std::vector<TruthRow> truth;
};

namespace detail {

inline std::string fmt_rate(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

inline double condition_factor(const Archetype& a, const Protocol& p, double temperature) {
  const double temp = std::exp(0.02 * (temperature - 25.0));
  const double rate = 1.0 + 0.08 * (p.charge_rate - 1.0) + 0.04 * (p.discharge_rate - 1.0);
  return a.fade * temp * rate;
}

struct BatteryDraw {
  Archetype arch;
  Protocol proto;
  double temperature = 25.0;
  FadeParams fade;
  double q_first = 1.0;  // first-cycle capacity relative to nominal
  double r0 = 0.05;      // initial resistance, ohm * Ah (scaled by 1 / Q_nominal)
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Normalized discharge curve on depth x in [0, 1], from 1 down to 0.
inline double discharge_shape(double x, double mid, double width) {
  const double f0 = logistic(mid / width), f1 = logistic((mid - 1.0) / width);
  return (logistic((mid - x) / width) - f1) / (f0 - f1);
}

inline std::vector<double> sample_times(double duration, int points, double jitter, Rng& rng) {
  std::vector<double> t(static_cast<std::size_t>(points));
  const double step = duration / (points - 1);
  for (int k = 0; k < points; ++k) {
    double tk = step * k;
    if (jitter > 0.0 && k > 0 && k < points - 1) tk += step * rng.uniform(-jitter, jitter);
    t[static_cast<std::size_t>(k)] = tk;
  }
  return t;
}

inline double add_voltage_noise(double v, const Archetype& a, double sd, Rng& rng) {
  if (sd <= 0.0) return v;
  const double margin = 0.05 * (a.v_max - a.v_min);
  return std::clamp(v + sd * rng.normal(), a.v_min - margin, a.v_max + margin);
}

inline Cycle make_cycle(int index, double soh, const BatteryDraw& d, double q_scale, int points, const Noise& noise,
                        Rng& rng) {
  const Archetype& a = d.arch;
  const double qn = a.nominal_capacity;
  const double q = soh * qn * q_scale;  // Ah delivered this cycle
  const double window = a.v_max - a.v_min;
  // resistance rises as the cell fades
  const double r = d.r0 / qn * (1.0 + 2.0 * (1.0 - soh));
  Cycle c;
  c.index = index;

  // Charge: CC up to v_max, then CV with exponentially decaying current.
  const double i_c = d.proto.charge_rate * qn;
  const double q_cc = (1.0 - d.proto.cv_fraction) * q;
  const double q_cv = d.proto.cv_fraction * q;
  const int cc_points = d.proto.cv_fraction > 0.0 ? std::max(2, points - points / 4) : points;
  const int cv_points = d.proto.cv_fraction > 0.0 ? points - cc_points + 1 : 0;
  const double t_cc = q_cc / i_c * 3600.0;
  const auto tc = sample_times(t_cc, cc_points, noise.jitter, rng);
  for (int k = 0; k < cc_points; ++k) {
    const double x = tc[static_cast<std::size_t>(k)] / t_cc;  // state of charge within CC
    const double ocv = a.v_min + window * (1.0 - discharge_shape(x * (1.0 - d.proto.cv_fraction), a.midpoint, a.width));
    const double v = std::min(a.v_max, ocv + r * i_c);
    c.charge_points.push_back({tc[static_cast<std::size_t>(k)], add_voltage_noise(v, a, noise.voltage, rng), i_c, 0.0});
  }
  if (cv_points > 0) {
    const double tau = q_cv * 3600.0 / (i_c * (1.0 - std::exp(-3.0)));
    const double t_cv = 3.0 * tau;
    const auto tv = sample_times(t_cv, cv_points, noise.jitter, rng);
    c.charge_points.back().voltage = add_voltage_noise(a.v_max, a, noise.voltage, rng);
    for (int k = 1; k < cv_points; ++k) {
      const double t = tv[static_cast<std::size_t>(k)];
      c.charge_points.push_back(
          {t_cc + t, add_voltage_noise(a.v_max, a, noise.voltage, rng), i_c * std::exp(-t / tau), 0.0});
    }
  }
  accumulate_capacity(c.charge_points);

  // Discharge: CC with a logistic voltage curve whose midpoint moves earlier
  // as the cell fades.
  const double i_d = d.proto.discharge_rate * qn;
  const double t_d = q / i_d * 3600.0;
  const double mid = a.midpoint - 0.5 * (1.0 - soh);
  const auto td = sample_times(t_d, points, noise.jitter, rng);
  for (int k = 0; k < points; ++k) {
    const double x = td[static_cast<std::size_t>(k)] / t_d;
    const double v = std::max(a.v_min, a.v_min + window * discharge_shape(x, mid, a.width) - r * i_d);
    c.discharge_points.push_back({td[static_cast<std::size_t>(k)], add_voltage_noise(v, a, noise.voltage, rng), -i_d, 0.0});
  }
  accumulate_capacity(c.discharge_points);
  c.discharge_capacity = c.discharge_points.back().cumulative_capacity;
  return c;
}

inline BatteryDraw draw_battery(const SynthConfig& cfg, Rng& rng) {
  BatteryDraw d;
  d.arch = cfg.archetypes[rng.below(cfg.archetypes.size())];
  d.proto = cfg.protocols[rng.below(cfg.protocols.size())];
  d.temperature = cfg.temperatures[rng.below(cfg.temperatures.size())];
  const double u = rng.uniform();
  const double life0 = std::exp(std::log(cfg.life_min) + u * (std::log(cfg.life_max) - std::log(cfg.life_min)));
  const double a = (1.0 - cfg.lambda) / life0 * condition_factor(d.arch, d.proto, d.temperature);
  const double kappa = rng.uniform(cfg.knee_min, cfg.knee_max);
  const double gamma = rng.uniform(cfg.sharp_min, cfg.sharp_max);
  d.fade.a = a;
  d.fade.n_knee = kappa * (1.0 - cfg.lambda) / a;
  d.fade.b = gamma * a * a / (1.0 - cfg.lambda);
  d.fade.shape = cfg.shape;
  d.fade.tau = 0.15 * (1.0 - cfg.lambda) / a;
  d.q_first = 1.0 + (cfg.capacity_spread > 0.0 ? cfg.capacity_spread * rng.uniform(-1.0, 1.0) : 0.0);
  // fast-fading cells start with higher resistance
  d.r0 = 0.03 * (1.0 + 0.6 * (1.0 - u) + 0.1 * rng.uniform());
  return d;
}

inline AgingCondition condition_of(const BatteryDraw& d) {
  AgingCondition c;
  c.battery_format = d.arch.format;
  c.anode = d.arch.anode;
  c.cathode = d.arch.cathode;
  c.electrolyte = d.arch.electrolyte;
  c.charge_protocol = "CC" + fmt_rate(d.proto.charge_rate) + "C" +
                      (d.proto.cv_fraction > 0.0 ? "-CV" + fmt_rate(d.proto.cv_fraction) : std::string());
  c.discharge_protocol = "CC" + fmt_rate(d.proto.discharge_rate) + "C";
  c.temperature = d.temperature;
  c.nominal_capacity = d.arch.nominal_capacity;
  c.manufacturer = "synthetic-" + d.arch.name;
  return c;
}

/// Label rules applied to the analytic SOH values of cycles 1..last.
inline LifeLabel expected_label(const FadeParams& f, int last, double q_first, const SynthConfig& cfg) {
  SohTrajectory traj;
  for (int n = 1; n <= last; ++n) traj.push_back({n, q_first * soh_model(f, n)});
  return derive_life_label(traj, LabelRules{cfg.lambda, cfg.band, 100});
}

}  // namespace detail

inline std::string battery_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn-%04d", i);
  return buf;
}

/// Generates one battery. Each battery has its own random stream, so fleets
/// can be generated in parallel.
inline std::pair<BatteryRecord, TruthRow> generate_battery(const SynthConfig& cfg, int i) {
  Rng rng(derive_seed(cfg.seed, "synth", static_cast<std::uint64_t>(i)));
  const detail::BatteryDraw d = detail::draw_battery(cfg, rng);
  TruthRow row;
  row.id = battery_id(i);
  row.fade = d.fade;
  row.true_life = analytic_life(d.fade, cfg.lambda, cfg.max_cycles);

  int last = row.true_life ? std::min(cfg.max_cycles, *row.true_life + cfg.tail_cycles) : cfg.max_cycles;
  if (cfg.truncate_fraction > 0.0 && rng.uniform() < cfg.truncate_fraction && row.true_life) {
    // stop while the SOH is still above lambda, inside or above the band
    const double target = rng.uniform(cfg.lambda + 0.001, cfg.lambda + 2.0 * cfg.band);
    int cut = 0;
    for (int n = 1; n < *row.true_life; ++n)
      if (d.q_first * soh_model(d.fade, n) >= target) cut = n;
    if (cut > 100) {
      last = cut;
      row.truncated = true;
    }
  }
  row.last_cycle = last;
  row.expected = detail::expected_label(d.fade, last, d.q_first, cfg);

  BatteryRecord rec;
  rec.id = row.id;
  rec.condition = detail::condition_of(d);
  rec.cycles.reserve(static_cast<std::size_t>(last));
  for (int n = 1; n <= last; ++n) {
    double scale = d.q_first;
    if (cfg.noise.capacity > 0.0) {
      scale *= 1.0 + std::clamp(cfg.noise.capacity * rng.normal(), -0.05, 0.05);
    }
    if (cfg.outlier_rate > 0.0 && n > 100 && rng.uniform() < cfg.outlier_rate) scale *= rng.uniform(0.5, 0.8);
    const int points = n <= 100 ? cfg.detail_points : cfg.coarse_points;
    rec.cycles.push_back(detail::make_cycle(n, soh_model(d.fade, n), d, scale, points, cfg.noise, rng));
  }
  return {std::move(rec), std::move(row)};
}

inline Fleet generate_fleet(const SynthConfig& cfg, int jobs = 1) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(cfg.n_batteries);
  std::vector<std::pair<BatteryRecord, TruthRow>> out(n);
  {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i = next++; i < n; i = next++) out[i] = generate_battery(cfg, static_cast<int>(i));
    };
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
  }
  Fleet fleet;
  std::size_t censored = 0;
  for (auto& [rec, row] : out) {
    if (!row.true_life) ++censored;
    fleet.records.push_back(std::move(rec));
    fleet.truth.push_back(std::move(row));
  }
  if (censored * 10 > n) {
    throw ConfigError("synth: " + std::to_string(censored) + " of " + std::to_string(n) +
                      " batteries do not reach end of life within max_cycles = " + std::to_string(cfg.max_cycles) +
                      "; raise max_cycles or shorten the life range");
  }
  return fleet;
}

/// id,true_life,a,b,n_knee,status,label
inline std::string labels_csv(const Fleet& fleet) {
  std::ostringstream os;
  os << "id,true_life,a,b,n_knee,status,label\n";
  for (const auto& t : fleet.truth) {
    os << t.id << ',' << (t.true_life ? std::to_string(*t.true_life) : std::string()) << ','
       << ingest::format_float(t.fade.a) << ',' << ingest::format_float(t.fade.b) << ','
       << ingest::format_float(t.fade.n_knee) << ',' << to_string(t.expected.status) << ','
       << (t.expected.status == LabelStatus::Label ? std::to_string(t.expected.cycle) : std::string()) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Early-signal check
// ---------------------------------------------------------------------------

/// Ranks with ties sharing their mean rank.
inline std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("spearman: need two equal-length series of length >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Least-squares slope of capacity / nominal over cycles 1..100.
inline double early_slope(const BatteryRecord& r) {
  const std::size_t n = std::min<std::size_t>(100, r.cycles.size());
  if (n < 2) throw DataError("early_slope: " + r.id + " has fewer than 2 cycles");
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < n; ++k) {
    mx += r.cycles[k].index;
    my += r.cycles[k].discharge_capacity / r.condition.nominal_capacity;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double dx = r.cycles[k].index - mx;
    sxy += dx * (r.cycles[k].discharge_capacity / r.condition.nominal_capacity - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Spearman correlation between the early capacity slope and the true life
/// over batteries that reach end of life. Steeper fade means shorter life, so
/// a strong signal gives a value near +1.
inline double early_signal(const Fleet& fleet) {
  std::vector<double> slope, life;
  for (std::size_t i = 0; i < fleet.records.size(); ++i) {
    if (!fleet.truth[i].true_life) continue;
    slope.push_back(early_slope(fleet.records[i]));
    life.push_back(*fleet.truth[i].true_life);
  }
  return spearman(slope, life);
}

/// Writes one battery file per record, labels.csv and manifest.json.
inline void write_fleet(const Fleet& fleet, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ingest::FleetManifest manifest;
  for (const auto& r : fleet.records) {
    const auto name = r.id + ".json";
    ingest::save_battery(r, dir / name);
    manifest.entries.push_back({name, ingest::DatasetTag::Synthetic});
  }
  ingest::write_text_file(dir / "labels.csv", labels_csv(fleet));
  ingest::save_manifest(manifest, dir / "manifest.json");
}

}  // namespace blp::synth
