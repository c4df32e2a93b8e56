#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"

#include "blp/diff/tensor.hpp"
#include "blp/random.hpp"

namespace blp::diff {

struct Parameter {
  Tensor2D value;
  Tensor2D grad;
  Tensor2D m;  // Adam first moment
  Tensor2D v;  // Adam second moment
  std::size_t fan_in = 1;
};

using ParameterValues = std::map<std::string, Tensor2D>;

/// Named parameters with gradient slots and Adam state, iterated in name
/// order. References returned by add() stay valid for the set's lifetime.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, std::size_t rows, std::size_t cols, std::size_t fan_in) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw ShapeError("parameter '" + name + "' registered twice");
    Parameter& p = it->second;
    p.value = Tensor2D(rows, cols);
    p.grad = Tensor2D(rows, cols);
    p.m = Tensor2D(rows, cols);
    p.v = Tensor2D(rows, cols);
    p.fan_in = std::max<std::size_t>(1, fan_in);
    return p;
  }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("no parameter named '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("no parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.contains(name); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  /// Total number of scalar weights.
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t t) { step_ = t; }

  /// Uniform in +-sqrt(1/fan_in); each parameter draws from its own stream
  /// keyed by (seed, name), so adding a parameter does not shift the others.
  void init_uniform(std::uint64_t seed) {
    for (auto& [name, p] : params_) {
      Rng rng(derive_seed(seed, name));
      const double bound = std::sqrt(1.0 / static_cast<double>(p.fan_in));
      for (double& w : p.value.values()) w = rng.uniform(-bound, bound);
    }
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.fill(0.0);
  }

  /// Clears optimizer moments and the step counter.
  void reset_optimizer() {
    for (auto& [_, p] : params_) {
      p.m.fill(0.0);
      p.v.fill(0.0);
    }
    step_ = 0;
  }

  ParameterValues snapshot() const {
    ParameterValues out;
    for (const auto& [name, p] : params_) out.emplace(name, p.value);
    return out;
  }

  /// Overwrites values from a snapshot that must name exactly these
  /// parameters with the same shapes.
  void restore(const ParameterValues& values) {
    if (values.size() != params_.size()) {
      throw ShapeError("restore: snapshot has " + std::to_string(values.size()) + " parameters, model has " +
                       std::to_string(params_.size()));
    }
    for (auto& [name, p] : params_) {
      auto it = values.find(name);
      if (it == values.end()) throw ShapeError("restore: snapshot lacks parameter '" + name + "'");
      if (!it->second.same_shape(p.value)) {
        throw ShapeError("restore: parameter '" + name + "' has shape " + it->second.shape_string() +
                         ", model expects " + p.value.shape_string());
      }
      p.value = it->second;
    }
  }

 private:
  std::map<std::string, Parameter> params_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. A non-finite gradient aborts before anything is modified.
inline void adam_step(ParameterSet& params, const AdamConfig& cfg) {
  for (const auto& [name, p] : params) {
    if (!p.grad.all_finite()) throw NumericalError("adam_step: non-finite gradient in parameter '" + name + "'");
  }
  params.set_step(params.step() + 1);
  const double t = static_cast<double>(params.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [_, p] : params) {
    double* w = p.value.data();
    double* g = p.grad.data();
    double* m = p.m.data();
    double* v = p.v.data();
    const std::size_t n = p.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
      g[i] = 0.0;
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
// "BLPW", u32 version, u32 header length, header JSON (model description),
// u32 parameter count, then per parameter in name order:
// {u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64}.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T take(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos));
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

struct CheckpointData {
  nlohmann::json header;
  ParameterValues values;
};

inline std::string encode_checkpoint(const nlohmann::json& header, const ParameterValues& values) {
  std::string out = "BLPW";
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string h = header.dump();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(values.size()));
  for (const auto& [name, t] : values) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    for (double x : t.values()) detail::put<double>(out, x);
  }
  return out;
}

inline CheckpointData decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, 4) != "BLPW") throw ParseError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  const auto hlen = detail::take<std::uint32_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw ParseError("checkpoint: truncated header");
  CheckpointData out;
  try {
    out.header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  const auto n = detail::take<std::uint32_t>(bytes, pos);
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = detail::take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw ParseError("checkpoint: truncated parameter name");
    std::string name(bytes.substr(pos, len));
    pos += len;
    const auto rows = detail::take<std::uint32_t>(bytes, pos);
    const auto cols = detail::take<std::uint32_t>(bytes, pos);
    Tensor2D t(rows, cols);
    for (double& x : t.values()) x = detail::take<double>(bytes, pos);
    out.values.emplace(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw ParseError("checkpoint: trailing bytes");
  return out;
}

}  // namespace blp::diff
