#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "blp/eval/metrics.hpp"
#include "blp/models/network.hpp"
#include "blp/random.hpp"

namespace blp::eval {

using models::ForwardPass;
using models::Network;
using prep::SampleTensor;

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  int epochs = 100;
  /// Stop after this many epochs without a new best validation MAPE; 0 disables.
  int patience = 20;
  std::uint64_t seed = 0;
  /// Keep the network's current label scaler and input standardization
  /// instead of refitting them on the training split (fine-tuning).
  bool keep_scaler = false;
};

struct TrainResult {
  bool untrained = false;
  int best_epoch = 0;  // 1-based; 0 when untrained
  int epochs_run = 0;
  std::vector<double> val_mape;      // one per epoch run
  std::vector<double> batch_losses;  // every optimizer step, in order
};

/// Extra loss for one training batch. Receives the batch's forward pass and
/// may fill d_embedding with the gradient of the extra loss with respect to
/// pass.embedding. Returns the extra loss value.
using BatchHook = std::function<double(const ForwardPass& pass, models::Tensor2D& d_embedding)>;

/// Mini-batches of sample indices, each homogeneous in usable cycles.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const SampleTensor> samples,
                                                          std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::map<int, std::vector<std::size_t>> by_s;
  for (std::size_t i = 0; i < samples.size(); ++i) by_s[samples[i].usable_cycles()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [s, idx] : by_s) {
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
      batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                           idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + batch_size)));
    }
  }
  rng.shuffle(std::span<std::vector<std::size_t>>(batches));
  return batches;
}

inline std::vector<double> labels_of(std::span<const SampleTensor> samples) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(static_cast<double>(s.label()));
  return out;
}

/// Mini-batch MSE training with Adam. After every epoch the validation MAPE
/// is measured; the network ends holding the parameters of the best epoch.
inline TrainResult train_model(Network& net, std::span<const SampleTensor> train, std::span<const SampleTensor> val,
                               const TrainConfig& cfg, const BatchHook& hook = {}) {
  if (train.empty()) throw DataError("train_model: empty training split");
  if (val.empty()) throw DataError("train_model: empty validation split");
  if (cfg.epochs < 0) throw ConfigError("train_model: epochs must be >= 0");
  if (!(cfg.lr > 0.0)) throw ConfigError("train_model: learning rate must be positive");

  const auto train_labels = labels_of(train);
  const auto val_labels = labels_of(val);
  if (!cfg.keep_scaler) {
    net.scaler() = models::LabelScaler::fit(train_labels);
    net.input_norm() = net.wants_input_norm() ? models::InputNorm::fit(train) : models::InputNorm{};
  }

  TrainResult result;
  if (cfg.epochs == 0) {
    result.untrained = true;
    return result;
  }

  Rng batch_rng(derive_seed(cfg.seed, "batch"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  const diff::AdamConfig adam{cfg.lr};
  auto best = net.params().snapshot();
  double best_mape = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<const SampleTensor*> batch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = make_batches(train, cfg.batch_size, batch_rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const std::string locus = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1);
      batch.clear();
      std::vector<double> targets;
      for (std::size_t i : batches[b]) {
        batch.push_back(&train[i]);
        targets.push_back(net.scaler().to_target(train_labels[i]));
      }
      net.params().zero_grad();
      ForwardPass pass = net.forward(batch, {true, &dropout_rng});
      double loss = diff::mse_loss(pass.prediction.values(), targets);
      const auto g = diff::mse_backward(pass.prediction.values(), targets);
      models::Tensor2D d_pred(g.size(), 1, g);
      models::Tensor2D d_emb;
      if (hook) loss += hook(pass, d_emb);
      if (!std::isfinite(loss)) throw NumericalError("training diverged at " + locus + ": loss is not finite");
      result.batch_losses.push_back(loss);
      net.backward(pass, d_pred, d_emb.size() ? &d_emb : nullptr);
      try {
        diff::adam_step(net.params(), adam);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at " + locus);
      }
    }

    const auto pred = models::predict(net, val);
    for (double p : pred) {
      if (!std::isfinite(p)) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite validation prediction");
      }
    }
    const double m = mape(val_labels, pred);
    result.val_mape.push_back(m);
    result.epochs_run = epoch;
    if (m < best_mape) {
      best_mape = m;
      best = net.params().snapshot();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  net.params().restore(best);
  return result;
}

}  // namespace blp::eval
