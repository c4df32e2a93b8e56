#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "blp/eval/metrics.hpp"
#include "blp/eval/mmd.hpp"
#include "blp/eval/split.hpp"
#include "blp/eval/train.hpp"
#include "blp/models/checkpoint.hpp"

namespace blp::eval {

struct ConditionMetrics {
  AgingCondition condition;
  Metrics metrics;
  std::optional<bool> seen;  // unknown when no training set is attached
};

struct RunReport {
  std::uint64_t seed = 0;
  bool untrained = false;
  int best_epoch = 0;
  std::optional<Metrics> val;
  Metrics test;
  std::vector<ConditionMetrics> per_condition;
  std::map<int, Metrics> per_s;
  std::vector<double> val_mape;
  std::vector<double> batch_losses;
  std::string checkpoint;  // encoded best network; empty for the dummy
};

struct EvalReport {
  std::string model;
  std::vector<RunReport> runs;
  MeanStd mape;
  MeanStd acc;
  std::map<int, std::pair<MeanStd, MeanStd>> per_s;  // S -> (mape, acc) over runs
};

/// Metrics for a set of predictions, broken down by condition and by S.
inline RunReport score(std::span<const SampleTensor> samples, std::span<const double> pred, double alpha,
                       const std::set<AgingCondition>* train_conditions = nullptr) {
  const auto truth = labels_of(samples);
  RunReport r;
  r.test = compute_metrics(truth, pred, alpha);
  std::map<AgingCondition, std::pair<std::vector<double>, std::vector<double>>> by_cond;
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_s;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& c = by_cond[samples[i].condition()];
    c.first.push_back(truth[i]);
    c.second.push_back(pred[i]);
    auto& s = by_s[samples[i].usable_cycles()];
    s.first.push_back(truth[i]);
    s.second.push_back(pred[i]);
  }
  for (const auto& [cond, tp] : by_cond) {
    ConditionMetrics cm{cond, compute_metrics(tp.first, tp.second, alpha), std::nullopt};
    if (train_conditions) cm.seen = train_conditions->count(cond) > 0;
    r.per_condition.push_back(std::move(cm));
  }
  for (const auto& [s, tp] : by_s) r.per_s[s] = compute_metrics(tp.first, tp.second, alpha);
  return r;
}

inline void finalize(EvalReport& report) {
  if (report.runs.empty()) throw DataError("report: no runs");
  std::vector<double> m, a;
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> per_s;
  for (const auto& r : report.runs) {
    m.push_back(r.test.mape);
    a.push_back(r.test.acc);
    for (const auto& [s, met] : r.per_s) {
      per_s[s].first.push_back(met.mape);
      per_s[s].second.push_back(met.acc);
    }
  }
  report.mape = summarize(m);
  report.acc = summarize(a);
  report.per_s.clear();
  for (const auto& [s, v] : per_s) report.per_s[s] = {summarize(v.first), summarize(v.second)};
}

inline std::set<AgingCondition> conditions_of(std::span<const SampleTensor> samples) {
  std::set<AgingCondition> out;
  for (const auto& s : samples) out.insert(s.condition());
  return out;
}

/// Model family plus configuration: a network describe() document, or
/// {"family": "dummy"}.
using ModelSpec = nlohmann::json;

inline bool is_dummy(const ModelSpec& spec) { return spec.at("family").get<std::string>() == "dummy"; }

struct ExperimentConfig {
  TrainConfig train;
  /// Run labels; each run draws its streams from derive_seed(base_seed, "run", label).
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t base_seed = 0;
  double alpha = 0.15;
  SplitOptions split;
};

inline std::uint64_t run_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
  return derive_seed(cfg.base_seed, "run", seed);
}

/// Trains and tests one model on its own seeded split.
inline RunReport run_once(std::span<const SampleTensor> samples, const ModelSpec& spec, const ExperimentConfig& cfg,
                          std::uint64_t seed) {
  const std::uint64_t stream = run_stream(cfg, seed);
  const auto assignment = split_dataset(samples, stream, cfg.split);
  const auto train = select(samples, assignment, SplitTag::Train);
  const auto val = select(samples, assignment, SplitTag::Val);
  const auto test = select(samples, assignment, SplitTag::Test);
  if (test.empty()) throw DataError("experiment: empty test split");
  const auto train_conditions = conditions_of(train);

  if (is_dummy(spec)) {
    const auto labels = labels_of(train);
    const double c = models::dummy_fit_predict(labels);
    std::vector<double> pred(test.size(), c);
    RunReport r = score(test, pred, cfg.alpha, &train_conditions);
    r.seed = seed;
    if (!val.empty()) r.val = compute_metrics(labels_of(val), std::vector<double>(val.size(), c), cfg.alpha);
    return r;
  }

  auto net = models::make_network(spec, derive_seed(stream, "init"));
  TrainConfig tc = cfg.train;
  tc.seed = stream;
  const TrainResult tr = train_model(*net, train, val, tc);
  const auto pred = models::predict(*net, test);
  RunReport r = score(test, pred, cfg.alpha, &train_conditions);
  r.seed = seed;
  r.untrained = tr.untrained;
  r.best_epoch = tr.best_epoch;
  r.val = compute_metrics(labels_of(val), models::predict(*net, val), cfg.alpha);
  r.val_mape = tr.val_mape;
  r.batch_losses = tr.batch_losses;
  r.checkpoint = models::encode_network(*net);
  return r;
}

inline EvalReport run_experiment(std::span<const SampleTensor> samples, const ModelSpec& spec,
                                 const ExperimentConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("experiment: empty seed list");
  EvalReport report;
  report.model = spec.at("family").get<std::string>();
  for (auto seed : cfg.seeds) report.runs.push_back(run_once(samples, spec, cfg, seed));
  finalize(report);
  return report;
}

/// Evaluates a trained network on every sample given.
inline RunReport evaluate_network(const models::Network& net, std::span<const SampleTensor> samples, double alpha) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  return score(samples, models::predict(net, samples), alpha);
}

// ---------------------------------------------------------------------------
// Usable-cycle sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  int s = 0;
  std::size_t n = 0;
  MeanStd mape;
  MeanStd acc;
};

inline std::vector<int> sorted_s_list(std::vector<int> s_list) {
  prep::check_s_values(s_list);
  std::sort(s_list.begin(), s_list.end());
  s_list.erase(std::unique(s_list.begin(), s_list.end()), s_list.end());
  return s_list;
}

inline std::vector<SampleTensor> with_usable_cycles(std::span<const SampleTensor> samples, int s) {
  std::vector<SampleTensor> out;
  for (const auto& x : samples)
    if (x.usable_cycles() == s) out.push_back(x);
  return out;
}

/// Evaluates one trained network at each S, in ascending S.
inline std::vector<SweepPoint> sweep_usable_cycles(const models::Network& net, std::span<const SampleTensor> samples,
                                                   std::vector<int> s_list, double alpha) {
  std::vector<SweepPoint> out;
  for (int s : sorted_s_list(std::move(s_list))) {
    const auto subset = with_usable_cycles(samples, s);
    if (subset.empty()) throw DataError("sweep: no samples with S = " + std::to_string(s));
    const auto m = evaluate_network(net, subset, alpha).test;
    out.push_back({s, m.n, {m.mape, 0.0}, {m.acc, 0.0}});
  }
  return out;
}

/// Trains and tests a fresh model family at each S, in ascending S.
inline std::vector<SweepPoint> sweep_usable_cycles(std::span<const SampleTensor> samples, const ModelSpec& spec,
                                                   std::vector<int> s_list, const ExperimentConfig& cfg) {
  std::vector<SweepPoint> out;
  for (int s : sorted_s_list(std::move(s_list))) {
    const auto subset = with_usable_cycles(samples, s);
    if (subset.empty()) throw DataError("sweep: no samples with S = " + std::to_string(s));
    const auto rep = run_experiment(subset, spec, cfg);
    std::size_t n = 0;
    for (const auto& r : rep.runs) n += r.test.n;
    out.push_back({s, n / rep.runs.size(), rep.mape, rep.acc});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seen / unseen aging conditions
// ---------------------------------------------------------------------------

struct SeenUnseen {
  std::size_t n_seen = 0;
  std::size_t n_unseen = 0;
  std::optional<Metrics> seen;
  std::optional<Metrics> unseen;
};

/// A test sample is seen when its full aging condition occurs in training.
inline SeenUnseen seen_unseen_report(std::span<const SampleTensor> test, std::span<const double> pred,
                                     const std::set<AgingCondition>& train_conditions, double alpha) {
  if (test.size() != pred.size()) throw ShapeError("seen_unseen_report: prediction count mismatch");
  std::vector<double> ts, ps, tu, pu;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double y = static_cast<double>(test[i].label());
    if (train_conditions.count(test[i].condition())) {
      ts.push_back(y);
      ps.push_back(pred[i]);
    } else {
      tu.push_back(y);
      pu.push_back(pred[i]);
    }
  }
  SeenUnseen out;
  out.n_seen = ts.size();
  out.n_unseen = tu.size();
  if (!ts.empty()) out.seen = compute_metrics(ts, ps, alpha);
  if (!tu.empty()) out.unseen = compute_metrics(tu, pu, alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-domain transfer
// ---------------------------------------------------------------------------

enum class TransferKind { Frozen, FineTune, DomainAdapt };

struct TransferMode {
  TransferKind kind = TransferKind::Frozen;
  double weight = 1.0;  // MMD weight, DomainAdapt only
};

inline const char* to_string(TransferKind k) {
  switch (k) {
    case TransferKind::Frozen: return "frozen";
    case TransferKind::FineTune: return "finetune";
    case TransferKind::DomainAdapt: return "domain_adapt";
  }
  return "?";
}

inline TransferKind transfer_kind_from_string(const std::string& s) {
  if (s == "frozen") return TransferKind::Frozen;
  if (s == "finetune") return TransferKind::FineTune;
  if (s == "domain_adapt") return TransferKind::DomainAdapt;
  throw ConfigError("unknown transfer mode '" + s + "' (expected frozen, finetune or domain_adapt)");
}

/// MMD penalty between the target batch embeddings and a random source batch
/// of a single S. Source batches and source dropout use their own streams.
class MmdHook {
 public:
  MmdHook(Network& net, std::span<const SampleTensor> source, double weight, std::size_t batch_size, std::uint64_t seed)
      : net_(net), weight_(weight), batch_size_(batch_size), rng_(derive_seed(seed, "source-batch")),
        dropout_rng_(derive_seed(seed, "source-dropout")) {
    if (source.empty()) throw DataError("domain adaptation: empty source set");
    if (weight < 0.0) throw ConfigError("domain adaptation: weight must be >= 0");
    for (const auto& s : source) by_s_[s.usable_cycles()].push_back(&s);
    for (const auto& [s, v] : by_s_) keys_.push_back(s);
  }

  double operator()(const ForwardPass& target, models::Tensor2D& d_embedding) {
    auto& group = by_s_.at(keys_[rng_.below(keys_.size())]);
    std::vector<const SampleTensor*> pick(group.begin(), group.end());
    rng_.shuffle(std::span<const SampleTensor*>(pick));
    pick.resize(std::min(pick.size(), batch_size_));
    const ForwardPass source = net_.forward(pick, {true, &dropout_rng_});
    const bool grads = weight_ != 0.0;
    auto r = mmd_squared(target.embedding, source.embedding, grads);
    if (grads) {
      for (double& v : r.dx.values()) v *= weight_;
      for (double& v : r.dy.values()) v *= weight_;
      d_embedding = std::move(r.dx);
      net_.backward(source, models::Tensor2D(pick.size(), 1), &r.dy);
    }
    return weight_ * r.value;
  }

 private:
  Network& net_;
  double weight_;
  std::size_t batch_size_;
  Rng rng_;
  Rng dropout_rng_;
  std::map<int, std::vector<const SampleTensor*>> by_s_;
  std::vector<int> keys_;
};

/// Adapts a pretrained network to a target fleet, one run per seed, each on
/// its own seeded split of the target samples.
inline EvalReport transfer_run(std::string_view pretrained, std::span<const SampleTensor> source,
                               std::span<const SampleTensor> target, const TransferMode& mode,
                               const ExperimentConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("transfer: empty seed list");
  EvalReport report;
  report.model = std::string("transfer/") + to_string(mode.kind);
  for (auto seed : cfg.seeds) {
    const std::uint64_t stream = run_stream(cfg, seed);
    const auto assignment = split_dataset(target, stream, cfg.split);
    const auto train = select(target, assignment, SplitTag::Train);
    const auto val = select(target, assignment, SplitTag::Val);
    const auto test = select(target, assignment, SplitTag::Test);
    auto net = models::decode_network(pretrained);

    TrainResult tr;
    tr.untrained = true;
    if (mode.kind != TransferKind::Frozen) {
      TrainConfig tc = cfg.train;
      tc.seed = stream;
      tc.keep_scaler = true;
      if (mode.kind == TransferKind::DomainAdapt) {
        MmdHook hook(*net, source, mode.weight, tc.batch_size, stream);
        tr = train_model(*net, train, val, tc, std::ref(hook));
      } else {
        tr = train_model(*net, train, val, tc);
      }
    }
    RunReport r = evaluate_network(*net, test, cfg.alpha);
    r.seed = seed;
    r.untrained = tr.untrained;
    r.best_epoch = tr.best_epoch;
    if (!val.empty()) r.val = compute_metrics(labels_of(val), models::predict(*net, val), cfg.alpha);
    r.val_mape = tr.val_mape;
    r.batch_losses = tr.batch_losses;
    r.checkpoint = models::encode_network(*net);
    report.runs.push_back(std::move(r));
  }
  finalize(report);
  return report;
}

}  // namespace blp::eval
