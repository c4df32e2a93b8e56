#pragma once

#include <string>
#include <vector>

#include "blp/models/network.hpp"

namespace blp::models {

struct MlpConfig {
  std::size_t hidden = 64;
  int layers = 2;
  double dropout = 0.0;
  bool ln_affine = false;
  double ln_eps = 1e-5;
  /// Standardize the values of real cycles with training statistics;
  /// padding stays zero.
  bool input_norm = true;

  void validate() const {
    if (hidden < 2) throw ConfigError("MlpConfig: hidden width must be >= 2");
    if (layers < 0) throw ConfigError("MlpConfig: layers must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("MlpConfig: dropout must lie in [0, 1)");
  }

  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

inline nlohmann::json to_json(const MlpConfig& c) {
  return {{"hidden", c.hidden}, {"layers", c.layers}, {"dropout", c.dropout}, {"ln_affine", c.ln_affine},
          {"ln_eps", c.ln_eps}, {"input_norm", c.input_norm}};
}

inline MlpConfig mlp_config_from_json(const nlohmann::json& j) {
  MlpConfig c;
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.ln_affine = j.at("ln_affine").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.input_norm = j.at("input_norm").get<bool>();
  return c;
}

/// Flattened-input baseline: the whole zero-padded 30,000-value sample goes
/// through an affine map to D, residual blocks, then a scalar head.
class MlpNetwork final : public Network {
 public:
  explicit MlpNetwork(const MlpConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t in = prep::kSampleWidth;
    Win_ = &params_.add("in.W", cfg.hidden, in, in);
    bin_ = &params_.add("in.b", 1, cfg.hidden, in);
    for (int l = 0; l < cfg.layers; ++l) {
      blocks_.emplace_back(params_, "block." + std::to_string(l), cfg.hidden, cfg.hidden, cfg.ln_affine, cfg.ln_eps,
                           cfg.dropout);
    }
    Wh_ = &params_.add("head.W", 1, cfg.hidden, cfg.hidden);
    bh_ = &params_.add("head.b", 1, 1, cfg.hidden);
    params_.init_uniform(init_seed);
    for (auto& b : blocks_) b.reset_norm();
  }

  const MlpConfig& config() const { return cfg_; }
  std::string family() const override { return "mlp"; }
  bool wants_input_norm() const override { return cfg_.input_norm; }
  nlohmann::json describe() const override { return {{"family", family()}, {"config", to_json(cfg_)}}; }

  ForwardPass forward(std::span<const SampleTensor* const> batch, const ForwardOptions& opt) const override {
    if (batch.empty()) throw ShapeError("MlpNetwork: empty batch");
    auto c = std::make_unique<Cache>();
    c->input = Tensor2D(batch.size(), prep::kSampleWidth);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto row = c->input.row(b);
      batch[b]->flat_cycle_major(row);
      if (input_norm_.active()) {
        for (int cyc = 0; cyc < batch[b]->usable_cycles(); ++cyc) {
          for (std::size_t k = 0; k < prep::kTokenWidth; ++k) {
            double& x = row[static_cast<std::size_t>(cyc) * prep::kTokenWidth + k];
            x = input_norm_.apply(k, x);
          }
        }
      }
    }
    Tensor2D g = diff::affine_forward(c->input, Win_->value, bin_->value);
    c->blocks.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) g = blocks_[l].forward(g, opt, c->blocks[l]);
    ForwardPass pass;
    pass.embedding = std::move(g);
    pass.prediction = diff::affine_forward(pass.embedding, Wh_->value, bh_->value);
    pass.cache = std::move(c);
    return pass;
  }

  void backward(const ForwardPass& pass, const Tensor2D& d_prediction, const Tensor2D* d_embedding) override {
    const auto& c = static_cast<const Cache&>(*pass.cache);
    Tensor2D dg;
    diff::affine_backward(d_prediction, pass.embedding, Wh_->value, &dg, Wh_->grad, bh_->grad);
    if (d_embedding) {
      if (!d_embedding->same_shape(dg)) throw ShapeError("backward: embedding gradient " + d_embedding->shape_string());
      for (std::size_t i = 0; i < dg.size(); ++i) dg[i] += (*d_embedding)[i];
    }
    for (std::size_t l = blocks_.size(); l-- > 0;) dg = blocks_[l].backward(dg, c.blocks[l]);
    diff::affine_backward(dg, c.input, Win_->value, nullptr, Win_->grad, bin_->grad);
  }

 private:
  struct Cache : ForwardCache {
    Tensor2D input;
    std::vector<ResidualBlock::Cache> blocks;
  };

  MlpConfig cfg_;
  Parameter* Win_;
  Parameter* bin_;
  std::vector<ResidualBlock> blocks_;
  Parameter* Wh_;
  Parameter* bh_;
};

/// Mean of the training labels, whatever the query.
inline double dummy_fit_predict(std::span<const double> train_labels) {
  if (train_labels.empty()) throw DataError("dummy: no training labels");
  double sum = 0.0;
  for (double y : train_labels) sum += y;
  return sum / static_cast<double>(train_labels.size());
}

}  // namespace blp::models
