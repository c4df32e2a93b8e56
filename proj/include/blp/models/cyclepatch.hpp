#pragma once

#include <memory>
#include <string>
#include <vector>

#include "blp/models/network.hpp"

namespace blp::models {

enum class InterKind { MlpStack, None };

struct CyclePatchConfig {
  std::size_t d1 = 32;  // token embedding width
  std::size_t d2 = 64;  // intra-cycle hidden width
  int intra_layers = 2;
  InterKind inter = InterKind::MlpStack;
  int inter_layers = 1;
  std::size_t inter_hidden = 64;
  double dropout = 0.0;
  bool disable_intra = false;
  bool disable_inter = false;
  bool ln_affine = false;
  double ln_eps = 1e-5;
  /// Standardize token positions with training statistics.
  bool input_norm = true;

  int effective_intra_layers() const { return disable_intra ? 0 : intra_layers; }
  bool uses_inter() const { return !disable_inter && inter == InterKind::MlpStack; }

  void validate() const {
    if (d1 < 1 || d2 < 1) throw ConfigError("CyclePatchConfig: D1 and D2 must be >= 1");
    if (effective_intra_layers() > 0 && d1 < 2) {
      throw ConfigError("CyclePatchConfig: intra-cycle layer norm needs D1 >= 2");
    }
    if (intra_layers < 0 || inter_layers < 0) throw ConfigError("CyclePatchConfig: layer counts must be >= 0");
    if (uses_inter() && inter_hidden < 2) throw ConfigError("CyclePatchConfig: inter hidden width must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("CyclePatchConfig: dropout must lie in [0, 1)");
  }

  friend bool operator==(const CyclePatchConfig&, const CyclePatchConfig&) = default;
};

inline nlohmann::json to_json(const CyclePatchConfig& c) {
  return {{"d1", c.d1},
          {"d2", c.d2},
          {"intra_layers", c.intra_layers},
          {"inter", c.inter == InterKind::MlpStack ? "mlp" : "none"},
          {"inter_layers", c.inter_layers},
          {"inter_hidden", c.inter_hidden},
          {"dropout", c.dropout},
          {"disable_intra", c.disable_intra},
          {"disable_inter", c.disable_inter},
          {"ln_affine", c.ln_affine},
          {"ln_eps", c.ln_eps},
          {"input_norm", c.input_norm}};
}

inline CyclePatchConfig cyclepatch_config_from_json(const nlohmann::json& j) {
  CyclePatchConfig c;
  c.d1 = j.at("d1").get<std::size_t>();
  c.d2 = j.at("d2").get<std::size_t>();
  c.intra_layers = j.at("intra_layers").get<int>();
  c.inter = j.at("inter").get<std::string>() == "none" ? InterKind::None : InterKind::MlpStack;
  c.inter_layers = j.at("inter_layers").get<int>();
  c.inter_hidden = j.at("inter_hidden").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.disable_intra = j.at("disable_intra").get<bool>();
  c.disable_inter = j.at("disable_inter").get<bool>();
  c.ln_affine = j.at("ln_affine").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.input_norm = j.at("input_norm").get<bool>();
  return c;
}

/// Cycle tokens of a sample: S rows of 900 values, each the (capacity,
/// voltage, current) rows of one cycle concatenated. Padding slots are not
/// tokens.
inline Tensor2D segment(const SampleTensor& sample) {
  const int s = sample.usable_cycles();
  Tensor2D tokens(static_cast<std::size_t>(s), prep::kTokenWidth);
  for (int c = 0; c < s; ++c) {
    auto src = sample.token(c);
    std::copy(src.begin(), src.end(), tokens.row(static_cast<std::size_t>(c)).begin());
  }
  return tokens;
}

/// Stacks the tokens of a batch whose samples share one usable-cycle count.
inline Tensor2D segment_batch(std::span<const SampleTensor* const> batch, const InputNorm& norm = {}) {
  if (batch.empty()) throw ShapeError("segment_batch: empty batch");
  const int s = batch.front()->usable_cycles();
  Tensor2D tokens(batch.size() * static_cast<std::size_t>(s), prep::kTokenWidth);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->usable_cycles() != s) {
      throw ShapeError("segment_batch: mixed usable-cycle counts in one batch (" + std::to_string(s) + " and " +
                       std::to_string(batch[b]->usable_cycles()) + ")");
    }
    for (int c = 0; c < s; ++c) {
      auto src = batch[b]->token(c);
      auto dst = tokens.row(b * static_cast<std::size_t>(s) + static_cast<std::size_t>(c));
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = norm.apply(k, src[k]);
    }
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Inter-cycle encoders
// ---------------------------------------------------------------------------

struct EncoderCache {
  virtual ~EncoderCache() = default;
};

/// Maps the cycle-token embeddings H of a batch to one vector per sample.
/// H holds B*S rows of width D1, sample-major. New encoder families plug in
/// here.
class InterCycleEncoder {
 public:
  virtual ~InterCycleEncoder() = default;
  virtual std::size_t output_width() const = 0;
  virtual Tensor2D forward(const Tensor2D& h, std::size_t batch, std::size_t cycles, const ForwardOptions& opt,
                           std::unique_ptr<EncoderCache>& cache) const = 0;
  /// Returns dL/dH and accumulates parameter gradients.
  virtual Tensor2D backward(const Tensor2D& dv, const EncoderCache& cache) = 0;
};

/// Order-free aggregation: v = mean over the S token embeddings.
class MeanPoolEncoder final : public InterCycleEncoder {
 public:
  explicit MeanPoolEncoder(std::size_t d1) : d1_(d1) {}
  std::size_t output_width() const override { return d1_; }

  Tensor2D forward(const Tensor2D& h, std::size_t batch, std::size_t cycles, const ForwardOptions&,
                   std::unique_ptr<EncoderCache>& cache) const override {
    auto c = std::make_unique<Cache>();
    c->cycles = cycles;
    Tensor2D v(batch, d1_);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < cycles; ++s) {
        auto row = h.row(b * cycles + s);
        for (std::size_t k = 0; k < d1_; ++k) v(b, k) += row[k];
      }
      for (std::size_t k = 0; k < d1_; ++k) v(b, k) /= static_cast<double>(cycles);
    }
    cache = std::move(c);
    return v;
  }

  Tensor2D backward(const Tensor2D& dv, const EncoderCache& cache) override {
    const auto& c = static_cast<const Cache&>(cache);
    Tensor2D dh(dv.rows() * c.cycles, d1_);
    for (std::size_t b = 0; b < dv.rows(); ++b)
      for (std::size_t s = 0; s < c.cycles; ++s)
        for (std::size_t k = 0; k < d1_; ++k) dh(b * c.cycles + s, k) = dv(b, k) / static_cast<double>(c.cycles);
    return dh;
  }

 private:
  struct Cache : EncoderCache {
    std::size_t cycles = 0;
  };
  std::size_t d1_;
};

/// H zero-padded to 100 x D1 and flattened, an affine map to the hidden
/// width, then residual feed-forward blocks.
class MlpStackEncoder final : public InterCycleEncoder {
 public:
  MlpStackEncoder(ParameterSet& params, const CyclePatchConfig& cfg)
      : d1_(cfg.d1),
        hidden_(cfg.inter_hidden),
        W_(&params.add("inter.in.W", cfg.inter_hidden, prep::kMaxCycles * cfg.d1, prep::kMaxCycles * cfg.d1)),
        b_(&params.add("inter.in.b", 1, cfg.inter_hidden, prep::kMaxCycles * cfg.d1)) {
    for (int l = 0; l < cfg.inter_layers; ++l) {
      blocks_.emplace_back(params, "inter." + std::to_string(l), cfg.inter_hidden, cfg.inter_hidden, cfg.ln_affine,
                           cfg.ln_eps, cfg.dropout);
    }
  }

  std::size_t output_width() const override { return hidden_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }

  Tensor2D forward(const Tensor2D& h, std::size_t batch, std::size_t cycles, const ForwardOptions& opt,
                   std::unique_ptr<EncoderCache>& cache) const override {
    auto c = std::make_unique<Cache>();
    // Sample-major rows make the per-sample flatten a reshape.
    c->flat = h.reshaped(batch, cycles * d1_);
    Tensor2D g = diff::affine_forward_padded(c->flat, W_->value, b_->value);
    c->blocks.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) g = blocks_[l].forward(g, opt, c->blocks[l]);
    cache = std::move(c);
    return g;
  }

  Tensor2D backward(const Tensor2D& dv, const EncoderCache& cache) override {
    const auto& c = static_cast<const Cache&>(cache);
    Tensor2D dg = dv;
    for (std::size_t l = blocks_.size(); l-- > 0;) dg = blocks_[l].backward(dg, c.blocks[l]);
    Tensor2D dflat;
    diff::affine_backward(dg, c.flat, W_->value, &dflat, W_->grad, b_->grad);
    return std::move(dflat).reshaped(c.flat.rows() * c.flat.cols() / d1_, d1_);
  }

 private:
  struct Cache : EncoderCache {
    Tensor2D flat;
    std::vector<ResidualBlock::Cache> blocks;
  };
  std::size_t d1_;
  std::size_t hidden_;
  Parameter* W_;
  Parameter* b_;
  std::vector<ResidualBlock> blocks_;
};

// ---------------------------------------------------------------------------
// CyclePatch
// ---------------------------------------------------------------------------

/// Cycle tokens -> shared affine embedding -> intra-cycle residual blocks
/// -> inter-cycle encoder -> linear projection to one scalar.
class CyclePatchNetwork final : public Network {
 public:
  explicit CyclePatchNetwork(const CyclePatchConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    We_ = &params_.add("embed.W", cfg.d1, prep::kTokenWidth, prep::kTokenWidth);
    be_ = &params_.add("embed.b", 1, cfg.d1, prep::kTokenWidth);
    for (int l = 0; l < cfg.effective_intra_layers(); ++l) {
      intra_.emplace_back(params_, "intra." + std::to_string(l), cfg.d1, cfg.d2, cfg.ln_affine, cfg.ln_eps,
                          cfg.dropout);
    }
    if (cfg.uses_inter()) {
      encoder_ = std::make_unique<MlpStackEncoder>(params_, cfg);
    } else {
      encoder_ = std::make_unique<MeanPoolEncoder>(cfg.d1);
    }
    const std::size_t width = encoder_->output_width();
    Wh_ = &params_.add("head.W", 1, width, width);
    bh_ = &params_.add("head.b", 1, 1, width);
    params_.init_uniform(init_seed);
    for (auto& b : intra_) b.reset_norm();
    if (auto* mlp = dynamic_cast<MlpStackEncoder*>(encoder_.get())) {
      for (auto& b : mlp->blocks()) b.reset_norm();
    }
  }

  const CyclePatchConfig& config() const { return cfg_; }
  std::string family() const override { return "cpmlp"; }
  bool wants_input_norm() const override { return cfg_.input_norm; }
  nlohmann::json describe() const override { return {{"family", family()}, {"config", to_json(cfg_)}}; }

  /// Token embeddings after the intra-cycle encoder (the rows of H), for a
  /// single sample.
  Tensor2D cycle_embeddings(const SampleTensor& sample) const {
    const SampleTensor* one[] = {&sample};
    auto pass = forward(one, {});
    return static_cast<const Cache&>(*pass.cache).h;
  }

  ForwardPass forward(std::span<const SampleTensor* const> batch, const ForwardOptions& opt) const override {
    auto c = std::make_unique<Cache>();
    c->batch = batch.size();
    c->cycles = static_cast<std::size_t>(batch.front()->usable_cycles());
    c->tokens = segment_batch(batch, input_norm_);
    Tensor2D z = diff::affine_forward(c->tokens, We_->value, be_->value);
    c->intra.resize(intra_.size());
    for (std::size_t l = 0; l < intra_.size(); ++l) z = intra_[l].forward(z, opt, c->intra[l]);
    c->h = std::move(z);
    ForwardPass pass;
    pass.embedding = encoder_->forward(c->h, c->batch, c->cycles, opt, c->encoder);
    pass.prediction = diff::affine_forward(pass.embedding, Wh_->value, bh_->value);
    pass.cache = std::move(c);
    return pass;
  }

  void backward(const ForwardPass& pass, const Tensor2D& d_prediction, const Tensor2D* d_embedding) override {
    const auto& c = static_cast<const Cache&>(*pass.cache);
    Tensor2D dv;
    diff::affine_backward(d_prediction, pass.embedding, Wh_->value, &dv, Wh_->grad, bh_->grad);
    if (d_embedding) {
      if (!d_embedding->same_shape(dv)) throw ShapeError("backward: embedding gradient " + d_embedding->shape_string());
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += (*d_embedding)[i];
    }
    Tensor2D dz = encoder_->backward(dv, *c.encoder);
    for (std::size_t l = intra_.size(); l-- > 0;) dz = intra_[l].backward(dz, c.intra[l]);
    diff::affine_backward(dz, c.tokens, We_->value, nullptr, We_->grad, be_->grad);
  }

 private:
  struct Cache : ForwardCache {
    std::size_t batch = 0;
    std::size_t cycles = 0;
    Tensor2D tokens;
    std::vector<ResidualBlock::Cache> intra;
    Tensor2D h;
    std::unique_ptr<EncoderCache> encoder;
  };

  CyclePatchConfig cfg_;
  Parameter* We_;
  Parameter* be_;
  std::vector<ResidualBlock> intra_;
  std::unique_ptr<InterCycleEncoder> encoder_;
  Parameter* Wh_;
  Parameter* bh_;
};

}  // namespace blp::models
