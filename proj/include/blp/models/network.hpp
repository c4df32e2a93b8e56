#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "blp/diff/ops.hpp"
#include "blp/diff/parameters.hpp"
#include "blp/preprocess.hpp"

namespace blp::models {

using diff::Parameter;
using diff::ParameterSet;
using diff::Tensor2D;
using prep::SampleTensor;

struct ForwardOptions {
  bool training = false;
  /// Required when training with dropout > 0.
  Rng* dropout_rng = nullptr;
};

/// Opaque per-model activation cache kept between forward and backward.
struct ForwardCache {
  virtual ~ForwardCache() = default;
};

struct ForwardPass {
  Tensor2D prediction;  // B x 1, in standardized label units
  Tensor2D embedding;   // B x width, the vector fed to the final projection
  std::unique_ptr<ForwardCache> cache;
};

/// Affine map between cycle-life labels and the standardized regression
/// target the networks are trained on.
struct LabelScaler {
  double mean = 0.0;
  double scale = 1.0;

  double to_target(double life) const { return (life - mean) / scale; }
  double to_life(double target) const { return mean + scale * target; }

  static LabelScaler fit(std::span<const double> labels) {
    if (labels.empty()) throw DataError("LabelScaler: no labels");
    double mean = 0.0;
    for (double y : labels) mean += y;
    mean /= static_cast<double>(labels.size());
    double var = 0.0;
    for (double y : labels) var += (y - mean) * (y - mean);
    var /= static_cast<double>(labels.size());
    const double sd = std::sqrt(var);
    return {mean, sd > 0.0 ? sd : 1.0};
  }
};

/// Fixed per-position standardization of cycle tokens, fitted on training
/// tokens. Folding it into the embedding weights gives the same function
/// family; it only changes how well plain Adam is conditioned.
struct InputNorm {
  std::vector<double> mean;   // kTokenWidth entries, or empty for identity
  std::vector<double> scale;

  bool active() const { return !mean.empty(); }

  double apply(std::size_t position, double x) const {
    return active() ? (x - mean[position]) / scale[position] : x;
  }

  static InputNorm fit(std::span<const SampleTensor> samples) {
    const std::size_t w = prep::kTokenWidth;
    std::vector<double> sum(w, 0.0), sq(w, 0.0);
    std::size_t count = 0;
    for (const auto& s : samples) {
      for (int c = 0; c < s.usable_cycles(); ++c) {
        auto tok = s.token(c);
        for (std::size_t k = 0; k < w; ++k) sum[k] += tok[k];
        ++count;
      }
    }
    if (count == 0) throw DataError("InputNorm: no tokens");
    InputNorm out;
    out.mean.resize(w);
    out.scale.resize(w);
    for (std::size_t k = 0; k < w; ++k) out.mean[k] = sum[k] / static_cast<double>(count);
    for (const auto& s : samples) {
      for (int c = 0; c < s.usable_cycles(); ++c) {
        auto tok = s.token(c);
        for (std::size_t k = 0; k < w; ++k) sq[k] += (tok[k] - out.mean[k]) * (tok[k] - out.mean[k]);
      }
    }
    for (std::size_t k = 0; k < w; ++k) {
      const double sd = std::sqrt(sq[k] / static_cast<double>(count));
      out.scale[k] = sd > 1e-6 ? sd : 1.0;
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"mean", mean}, {"scale", scale}}; }
  static InputNorm from_json(const nlohmann::json& j) {
    InputNorm n;
    n.mean = j.at("mean").get<std::vector<double>>();
    n.scale = j.at("scale").get<std::vector<double>>();
    if (n.mean.size() != n.scale.size() || (n.active() && n.mean.size() != prep::kTokenWidth)) {
      throw ShapeError("InputNorm: expected " + std::to_string(prep::kTokenWidth) + " positions");
    }
    return n;
  }
};

/// A trainable regressor over SampleTensors. Networks own their parameters
/// and are not copyable; checkpoints carry them between instances.
class Network {
 public:
  Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  virtual ~Network() = default;

  virtual std::string family() const = 0;
  /// Architecture description stored in checkpoint headers.
  virtual nlohmann::json describe() const = 0;
  virtual ForwardPass forward(std::span<const SampleTensor* const> batch, const ForwardOptions& opt) const = 0;
  /// Accumulates parameter gradients. d_embedding, when given, is added to the
  /// gradient flowing into the embedding (used by domain adaptation).
  virtual void backward(const ForwardPass& pass, const Tensor2D& d_prediction, const Tensor2D* d_embedding) = 0;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  LabelScaler& scaler() { return scaler_; }
  const LabelScaler& scaler() const { return scaler_; }
  InputNorm& input_norm() { return input_norm_; }
  const InputNorm& input_norm() const { return input_norm_; }
  /// Whether training should fit input_norm() on the training tokens.
  virtual bool wants_input_norm() const = 0;

 protected:
  ParameterSet params_;
  LabelScaler scaler_;
  InputNorm input_norm_;
};

/// Residual feed-forward block shared by the intra-cycle encoder, the MLP
/// inter-cycle encoder and the flattened-input baseline:
///   z_out = LN(W2 relu(W1 z + b1) + b2 + z)
class ResidualBlock {
 public:
  struct Cache {
    Tensor2D input;
    Tensor2D pre;   // W1 z + b1
    Tensor2D act;   // relu(pre) * dropout mask
    Tensor2D mask;  // empty when dropout is off
    diff::LayerNormCache ln;
  };

  ResidualBlock(ParameterSet& params, const std::string& prefix, std::size_t width, std::size_t hidden,
                bool ln_affine, double ln_eps, double dropout)
      : W1_(&params.add(prefix + ".W1", hidden, width, width)),
        b1_(&params.add(prefix + ".b1", 1, hidden, width)),
        W2_(&params.add(prefix + ".W2", width, hidden, hidden)),
        b2_(&params.add(prefix + ".b2", 1, width, hidden)),
        eps_(ln_eps),
        dropout_(dropout) {
    if (ln_affine) {
      gain_ = &params.add(prefix + ".ln_gain", 1, width, 1);
      bias_ = &params.add(prefix + ".ln_bias", 1, width, 1);
    }
  }

  /// Called after init_uniform: the layer-norm affine starts as identity.
  void reset_norm() {
    if (gain_) gain_->value.fill(1.0);
    if (bias_) bias_->value.fill(0.0);
  }

  Tensor2D forward(const Tensor2D& z, const ForwardOptions& opt, Cache& cache) const {
    cache.input = z;
    cache.pre = diff::affine_forward(z, W1_->value, b1_->value);
    cache.act = diff::relu_forward(cache.pre);
    if (opt.training && dropout_ > 0.0) {
      if (!opt.dropout_rng) throw ConfigError("dropout requires a random stream");
      cache.mask = diff::dropout_mask(cache.act.rows(), cache.act.cols(), dropout_, *opt.dropout_rng);
      diff::multiply_inplace(cache.act, cache.mask);
    }
    Tensor2D r = diff::affine_forward(cache.act, W2_->value, b2_->value);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += z[i];
    return diff::layer_norm_forward(r, eps_, &cache.ln, gain_ ? &gain_->value : nullptr,
                                    bias_ ? &bias_->value : nullptr);
  }

  Tensor2D backward(const Tensor2D& d_out, const Cache& cache) {
    Tensor2D dr = diff::layer_norm_backward(d_out, cache.ln, gain_ ? &gain_->value : nullptr,
                                            gain_ ? &gain_->grad : nullptr, bias_ ? &bias_->grad : nullptr);
    Tensor2D d_act;
    diff::affine_backward(dr, cache.act, W2_->value, &d_act, W2_->grad, b2_->grad);
    if (cache.mask.size()) diff::multiply_inplace(d_act, cache.mask);
    Tensor2D d_pre = diff::relu_backward(d_act, cache.pre);
    Tensor2D dz;
    diff::affine_backward(d_pre, cache.input, W1_->value, &dz, W1_->grad, b1_->grad);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dr[i];
    return dz;
  }

 private:
  Parameter* W1_;
  Parameter* b1_;
  Parameter* W2_;
  Parameter* b2_;
  Parameter* gain_ = nullptr;
  Parameter* bias_ = nullptr;
  double eps_;
  double dropout_;
};

/// Predictions in cycle-life units, one per sample, computed in batches of
/// samples sharing the same usable-cycle count.
inline std::vector<double> predict(const Network& net, std::span<const SampleTensor> samples,
                                   std::size_t batch_size = 64) {
  std::map<int, std::vector<std::size_t>> by_s;
  for (std::size_t i = 0; i < samples.size(); ++i) by_s[samples[i].usable_cycles()].push_back(i);
  std::vector<double> out(samples.size());
  std::vector<const SampleTensor*> batch;
  for (const auto& [s, idx] : by_s) {
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
      const std::size_t stop = std::min(idx.size(), start + batch_size);
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(&samples[idx[k]]);
      const ForwardPass pass = net.forward(batch, {});
      for (std::size_t k = start; k < stop; ++k) out[idx[k]] = net.scaler().to_life(pass.prediction[k - start]);
    }
  }
  return out;
}

/// Embedding rows (the projection input) for each sample, same batching as predict().
inline Tensor2D embed(const Network& net, std::span<const SampleTensor> samples, std::size_t batch_size = 64) {
  std::map<int, std::vector<std::size_t>> by_s;
  for (std::size_t i = 0; i < samples.size(); ++i) by_s[samples[i].usable_cycles()].push_back(i);
  Tensor2D out;
  std::vector<const SampleTensor*> batch;
  for (const auto& [s, idx] : by_s) {
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
      const std::size_t stop = std::min(idx.size(), start + batch_size);
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(&samples[idx[k]]);
      const ForwardPass pass = net.forward(batch, {});
      if (out.size() == 0) out = Tensor2D(samples.size(), pass.embedding.cols());
      for (std::size_t k = start; k < stop; ++k) {
        auto src = pass.embedding.row(k - start);
        std::copy(src.begin(), src.end(), out.row(idx[k]).begin());
      }
    }
  }
  return out;
}

}  // namespace blp::models
