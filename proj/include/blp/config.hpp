#pragma once

#include <cmath>
#include <cstdlib>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "blp/eval/analysis.hpp"
#include "blp/synth.hpp"

namespace blp::config {

using nlohmann::json;

/// Reads one JSON object, remembering which keys were consumed so that
/// leftovers (typos) can be reported with their full path.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!obj_.contains(key) || obj_.at(key).is_null()) return fallback;
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(child(key) + ": wrong type");
    }
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    used_.insert(key);
    if (!obj_.contains(key) || obj_.at(key).is_null()) return std::nullopt;
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(child(key) + ": wrong type");
    }
  }

  /// Sub-object reader; an absent key reads as an empty object.
  ObjectReader object(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return ObjectReader(obj_.contains(key) ? obj_.at(key) : empty, child(key));
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return obj_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + child(key) + "'");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

struct DataSection {
  std::string manifest;
  double lambda = 0.8;
  double calb_lambda = 0.9;
  std::optional<Q0Mode> q0_mode;
  ingest::FilterOptions filter;
};

inline std::vector<int> all_s_values() {
  std::vector<int> s(100);
  for (int k = 0; k < 100; ++k) s[k] = k + 1;
  return s;
}

struct PreprocessSection {
  std::vector<int> s_values = all_s_values();
  std::string cache;
};

struct OptimSection {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  int epochs = 100;
  int patience = 20;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double dropout = 0.0;
  bool grid_mode = false;
};

struct TransferSection {
  eval::TransferMode mode;
  std::string checkpoint;
  std::string source_manifest;
  std::string source_cache;
};

struct EvalSection {
  double alpha = 0.15;
  std::vector<int> sweep_s{10, 30, 50, 100};
  bool sweep_retrain = false;
  std::optional<std::uint64_t> split_seed;
  eval::SplitOptions split;
  TransferSection transfer;
  std::string checkpoint;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
  DataSection data;
  PreprocessSection preprocess;
  json model = {{"family", "cpmlp"}};
  OptimSection optim;
  EvalSection eval;
  synth::SynthConfig synth = synth::default_config();
  /// The document as resolved (defaults filled in), for reports.
  json resolved;
};

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

inline Q0Mode q0_mode_from_string(const std::string& s, const std::string& path) {
  if (s == "nominal") return Q0Mode::Nominal;
  if (s == "first_cycle") return Q0Mode::FirstCycle;
  throw ConfigError(path + ": expected \"nominal\" or \"first_cycle\"");
}

inline AgingCondition condition_from(ObjectReader r) {
  AgingCondition c;
  try {
    c.battery_format = battery_format_from_string(r.get<std::string>("battery_format", "other"));
  } catch (const ParseError& e) {
    throw ConfigError(r.child("battery_format") + ": " + e.what());
  }
  c.anode = r.get<std::string>("anode", "");
  c.cathode = r.get<std::string>("cathode", "");
  c.electrolyte = r.get<std::string>("electrolyte", "");
  c.charge_protocol = r.get<std::string>("charge_protocol", "");
  c.discharge_protocol = r.get<std::string>("discharge_protocol", "");
  c.temperature = r.get<double>("temperature", 25.0);
  c.nominal_capacity = r.get<double>("nominal_capacity", 1.0);
  c.manufacturer = r.get<std::string>("manufacturer", "");
  r.finish();
  return c;
}

/// Model section: {"family": "cpmlp" | "mlp" | "dummy", ...fields}. Returns
/// the describe()-style spec consumed by eval::run_experiment.
inline json model_spec_from(ObjectReader r, double dropout) {
  const auto family = r.get<std::string>("family", "cpmlp");
  if (family == "dummy") {
    r.finish();
    return {{"family", "dummy"}};
  }
  if (family == "cpmlp") {
    models::CyclePatchConfig c;
    c.d1 = r.get<std::size_t>("d1", c.d1);
    c.d2 = r.get<std::size_t>("d2", c.d2);
    c.intra_layers = r.get<int>("intra_layers", c.intra_layers);
    const auto inter = r.get<std::string>("inter", "mlp");
    if (inter == "mlp") {
      c.inter = models::InterKind::MlpStack;
    } else if (inter == "none") {
      c.inter = models::InterKind::None;
    } else {
      throw ConfigError(r.child("inter") + ": expected \"mlp\" or \"none\"");
    }
    c.inter_layers = r.get<int>("inter_layers", c.inter_layers);
    c.inter_hidden = r.get<std::size_t>("inter_hidden", c.inter_hidden);
    c.disable_intra = r.get<bool>("disable_intra", c.disable_intra);
    c.disable_inter = r.get<bool>("disable_inter", c.disable_inter);
    c.ln_affine = r.get<bool>("ln_affine", c.ln_affine);
    c.ln_eps = r.get<double>("ln_eps", c.ln_eps);
    c.input_norm = r.get<bool>("input_norm", c.input_norm);
    c.dropout = dropout;
    r.finish();
    c.validate();
    return {{"family", "cpmlp"}, {"config", models::to_json(c)}};
  }
  if (family == "mlp") {
    models::MlpConfig c;
    c.hidden = r.get<std::size_t>("hidden", c.hidden);
    c.layers = r.get<int>("layers", c.layers);
    c.ln_affine = r.get<bool>("ln_affine", c.ln_affine);
    c.ln_eps = r.get<double>("ln_eps", c.ln_eps);
    c.input_norm = r.get<bool>("input_norm", c.input_norm);
    c.dropout = dropout;
    r.finish();
    c.validate();
    return {{"family", "mlp"}, {"config", models::to_json(c)}};
  }
  throw ConfigError(r.child("family") + ": unknown model family '" + family + "'");
}

inline synth::Archetype archetype_from(ObjectReader r) {
  synth::Archetype a;
  a.name = r.get<std::string>("name", "cell");
  a.anode = r.get<std::string>("anode", "graphite");
  a.cathode = r.get<std::string>("cathode", "NMC");
  a.electrolyte = r.get<std::string>("electrolyte", "carbonate");
  try {
    a.format = battery_format_from_string(r.get<std::string>("format", "cylindrical"));
  } catch (const ParseError& e) {
    throw ConfigError(r.child("format") + ": " + e.what());
  }
  a.v_min = r.get<double>("v_min", a.v_min);
  a.v_max = r.get<double>("v_max", a.v_max);
  a.nominal_capacity = r.get<double>("nominal_capacity", a.nominal_capacity);
  a.midpoint = r.get<double>("midpoint", a.midpoint);
  a.width = r.get<double>("width", a.width);
  a.fade = r.get<double>("fade", a.fade);
  r.finish();
  return a;
}

inline synth::SynthConfig synth_from(ObjectReader r) {
  synth::SynthConfig c = synth::default_config();
  c.n_batteries = r.get<int>("n_batteries", c.n_batteries);
  if (r.has("archetypes")) {
    const json& arr = r.raw("archetypes");
    if (!arr.is_array()) throw ConfigError(r.child("archetypes") + ": expected an array");
    c.archetypes.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.archetypes.push_back(archetype_from(ObjectReader(arr[i], r.child("archetypes") + "[" + std::to_string(i) + "]")));
    }
  } else {
    r.object("archetypes");
  }
  if (r.has("protocols")) {
    const json& arr = r.raw("protocols");
    if (!arr.is_array()) throw ConfigError(r.child("protocols") + ": expected an array");
    c.protocols.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader p(arr[i], r.child("protocols") + "[" + std::to_string(i) + "]");
      synth::Protocol proto;
      proto.charge_rate = p.get<double>("charge_rate", proto.charge_rate);
      proto.cv_fraction = p.get<double>("cv_fraction", proto.cv_fraction);
      proto.discharge_rate = p.get<double>("discharge_rate", proto.discharge_rate);
      p.finish();
      c.protocols.push_back(proto);
    }
  } else {
    r.object("protocols");
  }
  c.temperatures = r.get<std::vector<double>>("temperatures", c.temperatures);
  c.life_min = r.get<double>("life_min", c.life_min);
  c.life_max = r.get<double>("life_max", c.life_max);
  c.knee_min = r.get<double>("knee_min", c.knee_min);
  c.knee_max = r.get<double>("knee_max", c.knee_max);
  c.sharp_min = r.get<double>("sharp_min", c.sharp_min);
  c.sharp_max = r.get<double>("sharp_max", c.sharp_max);
  const auto shape = r.get<std::string>("knee_shape", "quadratic");
  if (shape == "quadratic") {
    c.shape = synth::KneeShape::Quadratic;
  } else if (shape == "exponential") {
    c.shape = synth::KneeShape::Exponential;
  } else {
    throw ConfigError(r.child("knee_shape") + ": expected \"quadratic\" or \"exponential\"");
  }
  c.max_cycles = r.get<int>("max_cycles", c.max_cycles);
  c.tail_cycles = r.get<int>("tail_cycles", c.tail_cycles);
  c.detail_points = r.get<int>("detail_points", c.detail_points);
  c.coarse_points = r.get<int>("coarse_points", c.coarse_points);
  {
    auto n = r.object("noise");
    c.noise.voltage = n.get<double>("voltage", c.noise.voltage);
    c.noise.capacity = n.get<double>("capacity", c.noise.capacity);
    c.noise.jitter = n.get<double>("jitter", c.noise.jitter);
    n.finish();
  }
  c.capacity_spread = r.get<double>("capacity_spread", c.capacity_spread);
  c.truncate_fraction = r.get<double>("truncate_fraction", c.truncate_fraction);
  c.outlier_rate = r.get<double>("outlier_rate", c.outlier_rate);
  r.finish();
  return c;
}

/// Values allowed by the hyperparameter grid.
struct Grid {
  std::vector<std::size_t> batch_sizes{16, 32, 64, 128};
  std::vector<double> learning_rates{5e-4, 1e-3, 5e-3};
  std::vector<double> dropouts{0.0, 0.05, 0.1};
  std::vector<std::size_t> embedding_widths{32, 64, 128, 256};
  int max_layers = 12;
};

inline bool in_set(double x, const std::vector<double>& xs) {
  for (double v : xs)
    if (std::abs(x - v) <= 1e-12 * std::max(1.0, std::abs(v))) return true;
  return false;
}

inline void check_grid(const RunConfig& c, const Grid& g = {}) {
  if (std::find(g.batch_sizes.begin(), g.batch_sizes.end(), c.optim.batch_size) == g.batch_sizes.end()) {
    throw ConfigError("optim.batch_size: " + std::to_string(c.optim.batch_size) +
                      " is not in the grid {16, 32, 64, 128}");
  }
  if (!in_set(c.optim.lr, g.learning_rates)) throw ConfigError("optim.lr: not in the grid {5e-4, 1e-3, 5e-3}");
  if (!in_set(c.optim.dropout, g.dropouts)) throw ConfigError("optim.dropout: not in the grid {0, 0.05, 0.1}");
  const auto family = c.model.at("family").get<std::string>();
  if (family == "cpmlp") {
    const auto m = models::cyclepatch_config_from_json(c.model.at("config"));
    if (std::find(g.embedding_widths.begin(), g.embedding_widths.end(), m.d1) == g.embedding_widths.end()) {
      throw ConfigError("model.d1: not in the grid {32, 64, 128, 256}");
    }
    if (m.intra_layers > g.max_layers || m.inter_layers > g.max_layers) {
      throw ConfigError("model: layer counts must not exceed " + std::to_string(g.max_layers) + " in grid mode");
    }
  } else if (family == "mlp") {
    const auto m = models::mlp_config_from_json(c.model.at("config"));
    if (std::find(g.embedding_widths.begin(), g.embedding_widths.end(), m.hidden) == g.embedding_widths.end()) {
      throw ConfigError("model.hidden: not in the grid {32, 64, 128, 256}");
    }
    if (m.layers > g.max_layers) throw ConfigError("model.layers: must not exceed 12 in grid mode");
  }
}

/// Every optimizer/model combination of the grid for one CyclePatch base
/// configuration, in a fixed order.
inline std::vector<std::pair<OptimSection, models::CyclePatchConfig>> enumerate_grid(const OptimSection& base_optim,
                                                                                   const models::CyclePatchConfig& base,
                                                                                   const Grid& g = {}) {
  std::vector<std::pair<OptimSection, models::CyclePatchConfig>> out;
  for (auto bs : g.batch_sizes)
    for (double lr : g.learning_rates)
      for (double dr : g.dropouts)
        for (auto d1 : g.embedding_widths)
          for (int layers = 0; layers <= g.max_layers; ++layers) {
            OptimSection o = base_optim;
            o.batch_size = bs;
            o.lr = lr;
            o.dropout = dr;
            o.grid_mode = true;
            models::CyclePatchConfig m = base;
            m.d1 = d1;
            m.dropout = dr;
            m.intra_layers = layers;
            out.emplace_back(o, m);
          }
  return out;
}

/// Parses and validates a run configuration. Unknown keys anywhere are
/// rejected with their dotted path.
inline RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  ObjectReader root(doc, "");
  c.seed = root.get<std::uint64_t>("seed", c.seed);
  c.jobs = root.get<int>("jobs", c.jobs);
  c.out = root.get<std::string>("out", c.out);
  if (c.jobs < 1) throw ConfigError("jobs: must be >= 1");

  {
    auto r = root.object("data");
    c.data.manifest = r.get<std::string>("manifest", "");
    c.data.lambda = r.get<double>("lambda", c.data.lambda);
    c.data.calb_lambda = r.get<double>("calb_lambda", c.data.calb_lambda);
    if (auto q = r.optional<std::string>("q0_mode")) c.data.q0_mode = q0_mode_from_string(*q, r.child("q0_mode"));
    auto f = r.object("filter");
    c.data.filter.window = f.get<int>("window", c.data.filter.window);
    c.data.filter.rel_threshold = f.get<double>("threshold", c.data.filter.rel_threshold);
    f.finish();
    r.finish();
    for (double l : {c.data.lambda, c.data.calb_lambda}) {
      if (!(l > 0.0 && l < 1.0)) throw ConfigError("data.lambda: must lie in (0, 1)");
    }
    if (c.data.filter.window < 1 || c.data.filter.window % 2 == 0) {
      throw ConfigError("data.filter.window: must be a positive odd number");
    }
  }
  {
    auto r = root.object("preprocess");
    c.preprocess.s_values = r.get<std::vector<int>>("s_values", c.preprocess.s_values);
    c.preprocess.cache = r.get<std::string>("cache", c.preprocess.cache);
    r.finish();
    prep::check_s_values(c.preprocess.s_values);
  }
  {
    auto r = root.object("optim");
    c.optim.lr = r.get<double>("lr", c.optim.lr);
    c.optim.batch_size = r.get<std::size_t>("batch_size", c.optim.batch_size);
    c.optim.epochs = r.get<int>("epochs", c.optim.epochs);
    c.optim.patience = r.get<int>("patience", c.optim.patience);
    c.optim.seeds = r.get<std::vector<std::uint64_t>>("seeds", c.optim.seeds);
    c.optim.dropout = r.get<double>("dropout", c.optim.dropout);
    c.optim.grid_mode = r.get<bool>("grid_mode", c.optim.grid_mode);
    r.finish();
    if (!(c.optim.lr > 0.0)) throw ConfigError("optim.lr: must be positive");
    if (c.optim.batch_size == 0) throw ConfigError("optim.batch_size: must be positive");
    if (c.optim.epochs < 0) throw ConfigError("optim.epochs: must be >= 0");
    if (c.optim.patience < 0) throw ConfigError("optim.patience: must be >= 0");
    if (c.optim.seeds.empty()) throw ConfigError("optim.seeds: must be nonempty");
  }
  c.model = model_spec_from(root.object("model"), c.optim.dropout);
  {
    auto r = root.object("eval");
    c.eval.alpha = r.get<double>("alpha", c.eval.alpha);
    c.eval.sweep_s = r.get<std::vector<int>>("sweep_s", c.eval.sweep_s);
    c.eval.sweep_retrain = r.get<bool>("sweep_retrain", c.eval.sweep_retrain);
    c.eval.split_seed = r.optional<std::uint64_t>("split_seed");
    c.eval.checkpoint = r.get<std::string>("checkpoint", c.eval.checkpoint);
    {
      auto s = r.object("split");
      c.eval.split.sample_level = s.get<bool>("sample_level", false);
      if (s.has("holdout")) {
        const json& arr = s.raw("holdout");
        if (!arr.is_array()) throw ConfigError(s.child("holdout") + ": expected an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
          c.eval.split.holdout.push_back(
              condition_from(ObjectReader(arr[i], s.child("holdout") + "[" + std::to_string(i) + "]")));
        }
      } else {
        s.object("holdout");
      }
      s.finish();
    }
    {
      auto t = r.object("transfer");
      c.eval.transfer.mode.kind = eval::transfer_kind_from_string(t.get<std::string>("mode", "frozen"));
      c.eval.transfer.mode.weight = t.get<double>("weight", 1.0);
      c.eval.transfer.checkpoint = t.get<std::string>("checkpoint", "");
      c.eval.transfer.source_manifest = t.get<std::string>("source_manifest", "");
      c.eval.transfer.source_cache = t.get<std::string>("source_cache", "");
      t.finish();
      if (c.eval.transfer.mode.weight < 0.0) throw ConfigError("eval.transfer.weight: must be >= 0");
    }
    r.finish();
    if (!(c.eval.alpha > 0.0)) throw ConfigError("eval.alpha: must be positive");
    prep::check_s_values(c.eval.sweep_s);
  }
  c.synth = synth_from(root.object("synth"));
  c.synth.seed = c.seed;
  c.synth.lambda = c.data.lambda;
  root.finish();
  if (c.optim.grid_mode) check_grid(c);
  return c;
}

inline json synth_json(const synth::SynthConfig& s) {
  json arch = json::array();
  for (const auto& a : s.archetypes) {
    arch.push_back({{"name", a.name}, {"anode", a.anode}, {"cathode", a.cathode}, {"electrolyte", a.electrolyte},
                    {"format", std::string(to_string(a.format))}, {"v_min", a.v_min}, {"v_max", a.v_max},
                    {"nominal_capacity", a.nominal_capacity}, {"midpoint", a.midpoint}, {"width", a.width},
                    {"fade", a.fade}});
  }
  json protos = json::array();
  for (const auto& p : s.protocols) {
    protos.push_back({{"charge_rate", p.charge_rate}, {"cv_fraction", p.cv_fraction}, {"discharge_rate", p.discharge_rate}});
  }
  return {{"n_batteries", s.n_batteries},
          {"archetypes", arch},
          {"protocols", protos},
          {"temperatures", s.temperatures},
          {"life_min", s.life_min},
          {"life_max", s.life_max},
          {"knee_min", s.knee_min},
          {"knee_max", s.knee_max},
          {"sharp_min", s.sharp_min},
          {"sharp_max", s.sharp_max},
          {"knee_shape", s.shape == synth::KneeShape::Quadratic ? "quadratic" : "exponential"},
          {"max_cycles", s.max_cycles},
          {"tail_cycles", s.tail_cycles},
          {"detail_points", s.detail_points},
          {"coarse_points", s.coarse_points},
          {"noise", {{"voltage", s.noise.voltage}, {"capacity", s.noise.capacity}, {"jitter", s.noise.jitter}}},
          {"capacity_spread", s.capacity_spread},
          {"truncate_fraction", s.truncate_fraction},
          {"outlier_rate", s.outlier_rate}};
}

/// Fully resolved configuration, defaults included.
inline json to_json(const RunConfig& c) {
  json model = c.model;
  json holdout = json::array();
  for (const auto& h : c.eval.split.holdout) holdout.push_back(h.key());
  json data = {{"manifest", c.data.manifest},
               {"lambda", c.data.lambda},
               {"calb_lambda", c.data.calb_lambda},
               {"filter", {{"window", c.data.filter.window}, {"threshold", c.data.filter.rel_threshold}}}};
  data["q0_mode"] = c.data.q0_mode ? json(*c.data.q0_mode == Q0Mode::Nominal ? "nominal" : "first_cycle") : json(nullptr);
  json ev = {{"alpha", c.eval.alpha},
             {"sweep_s", c.eval.sweep_s},
             {"sweep_retrain", c.eval.sweep_retrain},
             {"checkpoint", c.eval.checkpoint},
             {"split", {{"sample_level", c.eval.split.sample_level}, {"holdout", holdout}}},
             {"transfer",
              {{"mode", eval::to_string(c.eval.transfer.mode.kind)},
               {"weight", c.eval.transfer.mode.weight},
               {"checkpoint", c.eval.transfer.checkpoint},
               {"source_manifest", c.eval.transfer.source_manifest},
               {"source_cache", c.eval.transfer.source_cache}}}};
  ev["split_seed"] = c.eval.split_seed ? json(*c.eval.split_seed) : json(nullptr);
  return {{"seed", c.seed},
          {"jobs", c.jobs},
          {"out", c.out},
          {"data", data},
          {"preprocess", {{"s_values", c.preprocess.s_values}, {"cache", c.preprocess.cache}}},
          {"model", model},
          {"optim",
           {{"lr", c.optim.lr},
            {"batch_size", c.optim.batch_size},
            {"epochs", c.optim.epochs},
            {"patience", c.optim.patience},
            {"seeds", c.optim.seeds},
            {"dropout", c.optim.dropout},
            {"grid_mode", c.optim.grid_mode}}},
          {"eval", ev},
          {"synth", synth_json(c.synth)}};
}

inline eval::ExperimentConfig experiment_config(const RunConfig& c) {
  eval::ExperimentConfig e;
  e.train.lr = c.optim.lr;
  e.train.batch_size = c.optim.batch_size;
  e.train.epochs = c.optim.epochs;
  e.train.patience = c.optim.patience;
  e.seeds = c.optim.seeds;
  e.base_seed = c.seed;
  e.alpha = c.eval.alpha;
  e.split = c.eval.split;
  return e;
}

inline prep::DatasetOptions dataset_options(const RunConfig& c) {
  prep::DatasetOptions d;
  d.s_values = c.preprocess.s_values;
  d.lambda = c.data.lambda;
  d.calb_lambda = c.data.calb_lambda;
  d.filter = c.data.filter;
  d.q0_override = c.data.q0_mode;
  d.jobs = c.jobs;
  return d;
}

}  // namespace blp::config
