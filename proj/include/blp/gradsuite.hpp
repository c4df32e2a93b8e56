#pragma once

#include <functional>
#include <string>
#include <vector>

#include "blp/diff/gradcheck.hpp"
#include "blp/eval/mmd.hpp"
#include "blp/models/cyclepatch.hpp"
#include "blp/models/mlp.hpp"

namespace blp::gradsuite {

using diff::ParameterSet;
using diff::Tensor2D;

struct SuiteEntry {
  std::string name;
  std::string shape;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst_parameter;
  bool passed() const { return max_rel_error <= tolerance; }
};

namespace detail {

inline void fill_uniform(Tensor2D& t, Rng& rng, double lo, double hi) {
  for (double& x : t.values()) x = rng.uniform(lo, hi);
}

inline int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

/// sum(y .* R) for a fixed random R; dL/dy = R.
inline double weighted_sum(const Tensor2D& y, const Tensor2D& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

inline SuiteEntry run(const std::string& name, const std::string& shape, double tol, ParameterSet& ps,
                      const diff::LossClosure& loss) {
  const auto rep = diff::check_gradients(loss, ps, tol);
  SuiteEntry e{name, shape, rep.max_rel_error(), tol, {}};
  for (const auto& p : rep.entries)
    if (p.max_rel_error == e.max_rel_error) e.worst_parameter = p.name;
  return e;
}

inline std::string dims(std::initializer_list<std::size_t> xs) {
  std::string s;
  for (auto x : xs) s += (s.empty() ? "" : "x") + std::to_string(x);
  return s;
}

inline std::vector<prep::SampleTensor> random_samples(Rng& rng, int batch, int s) {
  std::vector<prep::SampleTensor> out;
  for (int b = 0; b < batch; ++b) {
    auto st = std::make_shared<prep::SampleTensor::Storage>(static_cast<std::size_t>(s) * prep::kTokenWidth);
    for (auto& x : *st) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    out.emplace_back("g" + std::to_string(b), AgingCondition{}, s, 150, st);
  }
  return out;
}

inline double network_loss(models::Network& net, const std::vector<const prep::SampleTensor*>& batch,
                           const std::vector<double>& target, bool with_gradients) {
  auto pass = net.forward(batch, {});
  const double l = diff::mse_loss(pass.prediction.values(), target);
  if (with_gradients) {
    const auto g = diff::mse_backward(pass.prediction.values(), target);
    net.backward(pass, Tensor2D(g.size(), 1, g), nullptr);
  }
  return l;
}

/// Targets a fixed distance from the initial predictions; a residual near zero
/// leaves only round-off in the finite differences.
inline std::vector<double> offset_targets(models::Network& net, const std::vector<const prep::SampleTensor*>& batch,
                                          Rng& rng) {
  auto pass = net.forward(batch, {});
  std::vector<double> t(batch.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = pass.prediction[i] + rng.uniform(0.5, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

}  // namespace detail

/// Central finite-difference checks over randomized shapes: each kernel op at
/// its own tolerance, the MMD penalty, and whole CyclePatch and MLP models.
inline std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed, int per_op = 12, int model_configs = 12) {
  using namespace detail;
  Rng rng(derive_seed(seed, "gradsuite"));
  std::vector<SuiteEntry> out;

  for (int k = 0; k < per_op; ++k) {
    const std::size_t n = pick(rng, 1, 5), din = pick(rng, 1, 7), dout = pick(rng, 1, 6);
    ParameterSet ps;
    auto& x = ps.add("x", n, din, 1);
    auto& W = ps.add("W", dout, din, 1);
    auto& b = ps.add("b", 1, dout, 1);
    fill_uniform(x.value, rng, -1, 1);
    fill_uniform(W.value, rng, -1, 1);
    fill_uniform(b.value, rng, -1, 1);
    Tensor2D r(n, dout);
    fill_uniform(r, rng, -1, 1);
    out.push_back(run("affine", dims({n, din, dout}), 1e-6, ps, [&](bool g) {
      const Tensor2D y = diff::affine_forward(x.value, W.value, b.value);
      if (g) {
        Tensor2D dx;
        diff::affine_backward(r, x.value, W.value, &dx, W.grad, b.grad);
        for (std::size_t i = 0; i < dx.size(); ++i) x.grad[i] += dx[i];
      }
      return weighted_sum(y, r);
    }));
  }

  for (int k = 0; k < per_op; ++k) {
    // two-column rows normalize to +-1 whatever the input, so the Jacobian is
    // essentially zero and a relative check is meaningless there
    const std::size_t n = pick(rng, 1, 4), d = pick(rng, 3, 8);
    const bool affine = k % 2 == 1;
    ParameterSet ps;
    auto& x = ps.add("x", n, d, 1);
    fill_uniform(x.value, rng, -2, 2);
    diff::Parameter* gain = affine ? &ps.add("gain", 1, d, 1) : nullptr;
    diff::Parameter* bias = affine ? &ps.add("bias", 1, d, 1) : nullptr;
    if (affine) {
      fill_uniform(gain->value, rng, 0.5, 1.5);
      fill_uniform(bias->value, rng, -0.5, 0.5);
    }
    Tensor2D r(n, d);
    fill_uniform(r, rng, -1, 1);
    out.push_back(run(affine ? "layer_norm_affine" : "layer_norm", dims({n, d}), 1e-5, ps, [&, gain, bias](bool g) {
      diff::LayerNormCache cache;
      const Tensor2D y = diff::layer_norm_forward(x.value, 1e-5, &cache, gain ? &gain->value : nullptr,
                                                  bias ? &bias->value : nullptr);
      if (g) {
        const Tensor2D dx = diff::layer_norm_backward(r, cache, gain ? &gain->value : nullptr,
                                                      gain ? &gain->grad : nullptr, bias ? &bias->grad : nullptr);
        for (std::size_t i = 0; i < dx.size(); ++i) x.grad[i] += dx[i];
      }
      return weighted_sum(y, r);
    }));
  }

  for (int k = 0; k < per_op; ++k) {
    const std::size_t n = pick(rng, 1, 5), d = pick(rng, 1, 8);
    ParameterSet ps;
    auto& x = ps.add("x", n, d, 1);
    // keep clear of the kink at 0
    for (double& v : x.value.values()) v = rng.uniform(1e-3, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    Tensor2D r(n, d);
    fill_uniform(r, rng, -1, 1);
    out.push_back(run("relu", dims({n, d}), 1e-6, ps, [&](bool g) {
      const Tensor2D y = diff::relu_forward(x.value);
      if (g) {
        const Tensor2D dx = diff::relu_backward(r, x.value);
        for (std::size_t i = 0; i < dx.size(); ++i) x.grad[i] += dx[i];
      }
      return weighted_sum(y, r);
    }));
  }

  for (int k = 0; k < per_op; ++k) {
    const std::size_t n = pick(rng, 1, 9);
    ParameterSet ps;
    auto& p = ps.add("pred", 1, n, 1);
    fill_uniform(p.value, rng, -2, 2);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = p.value[i] + rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    out.push_back(run("mse", dims({n}), 1e-8, ps, [&](bool g) {
      if (g) {
        const auto d = diff::mse_backward(p.value.values(), t);
        for (std::size_t i = 0; i < n; ++i) p.grad[i] += d[i];
      }
      return diff::mse_loss(p.value.values(), t);
    }));
  }

  for (int k = 0; k < per_op / 2; ++k) {
    const std::size_t n = pick(rng, 1, 5), m = pick(rng, 1, 5), d = pick(rng, 1, 4);
    ParameterSet ps;
    auto& x = ps.add("x", n, d, 1);
    auto& y = ps.add("y", m, d, 1);
    fill_uniform(x.value, rng, -1, 1);
    fill_uniform(y.value, rng, -0.5, 1.5);
    const double h = eval::median_bandwidth(x.value, y.value);
    out.push_back(run("mmd_squared", dims({n, m, d}), 1e-6, ps, [&, h](bool g) {
      auto res = eval::mmd_squared_fixed(x.value, y.value, h, g);
      if (g) {
        for (std::size_t i = 0; i < res.dx.size(); ++i) x.grad[i] += res.dx[i];
        for (std::size_t i = 0; i < res.dy.size(); ++i) y.grad[i] += res.dy[i];
      }
      return res.value;
    }));
  }

  for (int k = 0; k < model_configs; ++k) {
    models::CyclePatchConfig c;
    c.d1 = pick(rng, 3, 8);
    c.d2 = pick(rng, 1, 6);
    c.intra_layers = pick(rng, 0, 2);
    c.inter_layers = pick(rng, 0, 2);
    c.inter_hidden = pick(rng, 3, 6);
    c.disable_inter = k % 4 == 3;
    c.ln_affine = k % 3 == 2;
    c.input_norm = false;
    if (k == 0) {
      c.d1 = 8;
      c.intra_layers = 2;
    }
    const int s = k == 0 ? 3 : pick(rng, 1, 4);
    const int batch = pick(rng, 1, 3);
    models::CyclePatchNetwork net(c, derive_seed(seed, "gradsuite-init", static_cast<std::uint64_t>(k)));
    auto samples = random_samples(rng, batch, s);
    std::vector<const prep::SampleTensor*> ptrs;
    for (const auto& x : samples) ptrs.push_back(&x);
    const auto target = offset_targets(net, ptrs, rng);
    const std::string shape = "D1=" + std::to_string(c.d1) + " D2=" + std::to_string(c.d2) +
                              " L=" + std::to_string(c.intra_layers) + " Linter=" + std::to_string(c.inter_layers) +
                              (c.disable_inter ? " pool" : "") + " S=" + std::to_string(s) + " B=" + std::to_string(batch);
    out.push_back(run("cpmlp", shape, 1e-4, net.params(),
                      [&](bool g) { return network_loss(net, ptrs, target, g); }));
  }

  for (int k = 0; k < 2; ++k) {
    models::MlpConfig c;
    c.hidden = 8;
    c.layers = 2;
    c.ln_affine = k == 1;
    c.input_norm = false;
    models::MlpNetwork net(c, derive_seed(seed, "gradsuite-mlp", static_cast<std::uint64_t>(k)));
    const int s = pick(rng, 1, 4);
    auto samples = random_samples(rng, 2, s);
    std::vector<const prep::SampleTensor*> ptrs{&samples[0], &samples[1]};
    const auto target = offset_targets(net, ptrs, rng);
    out.push_back(run("mlp", "D=8 L=2 S=" + std::to_string(s), 1e-4, net.params(),
                      [&](bool g) { return network_loss(net, ptrs, target, g); }));
  }
  return out;
}

}  // namespace blp::gradsuite
