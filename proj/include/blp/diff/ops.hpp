#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "blp/diff/tensor.hpp"
#include "blp/random.hpp"

namespace blp::diff {

namespace kernel {

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t k = 0; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
#pragma omp simd
  for (std::size_t k = 0; k < n; ++k) y[k] += alpha * x[k];
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Affine map  y = x W^T + b
// ---------------------------------------------------------------------------

inline void check_affine(const Tensor2D& x, const Tensor2D& W, const Tensor2D& b, bool allow_padding) {
  const bool cols_ok = allow_padding ? x.cols() <= W.cols() : x.cols() == W.cols();
  if (!cols_ok) {
    throw ShapeError("affine: input " + x.shape_string() + " does not match weight " + W.shape_string());
  }
  if (b.size() != W.rows()) {
    throw ShapeError("affine: bias " + b.shape_string() + " does not match weight " + W.shape_string());
  }
}

namespace detail {

inline Tensor2D affine_forward_impl(const Tensor2D& x, const Tensor2D& W, const Tensor2D& b) {
  const std::size_t n = x.rows(), d_in = x.cols(), d_out = W.rows(), ldw = W.cols();
  Tensor2D y(n, d_out);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d_in;
    double* yi = y.data() + i * d_out;
    for (std::size_t o = 0; o < d_out; ++o) yi[o] = b[o] + kernel::dot(xi, W.data() + o * ldw, d_in);
  }
  return y;
}

}  // namespace detail

inline Tensor2D affine_forward(const Tensor2D& x, const Tensor2D& W, const Tensor2D& b) {
  check_affine(x, W, b, false);
  return detail::affine_forward_impl(x, W, b);
}

/// Affine map on an input that is implicitly zero-padded on the right up to
/// W.cols(); only the leading x.cols() weight columns take part.
inline Tensor2D affine_forward_padded(const Tensor2D& x, const Tensor2D& W, const Tensor2D& b) {
  check_affine(x, W, b, true);
  return detail::affine_forward_impl(x, W, b);
}

/// Accumulates dW and db; writes dx when requested. Works for both the plain
/// and the zero-padded forward (dW columns past x.cols() stay untouched).
inline void affine_backward(const Tensor2D& dy, const Tensor2D& x, const Tensor2D& W, Tensor2D* dx,
                            Tensor2D& dW, Tensor2D& db) {
  const std::size_t n = x.rows(), d_in = x.cols(), d_out = W.rows(), ldw = W.cols();
  if (dy.rows() != n || dy.cols() != d_out) {
    throw ShapeError("affine_backward: upstream " + dy.shape_string() + " vs output [" + std::to_string(n) +
                     "x" + std::to_string(d_out) + "]");
  }
  if (!dW.same_shape(W) || db.size() != d_out) throw ShapeError("affine_backward: gradient buffers misshaped");
  if (dx) *dx = Tensor2D(n, d_in);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d_in;
    const double* gi = dy.data() + i * d_out;
    for (std::size_t o = 0; o < d_out; ++o) {
      const double g = gi[o];
      if (g == 0.0) continue;
      db[o] += g;
      kernel::axpy(g, xi, dW.data() + o * ldw, d_in);
      if (dx) kernel::axpy(g, W.data() + o * ldw, dx->data() + i * d_in, d_in);
    }
  }
}

// ---------------------------------------------------------------------------
// Layer normalization over each row
// ---------------------------------------------------------------------------

struct LayerNormCache {
  Tensor2D normalized;          // x-hat
  std::vector<double> inv_std;  // per row
};

/// y = (x - mean) / sqrt(var + eps) per row, optionally followed by a learned
/// per-column gain and bias.
inline Tensor2D layer_norm_forward(const Tensor2D& x, double eps, LayerNormCache* cache = nullptr,
                                   const Tensor2D* gain = nullptr, const Tensor2D* bias = nullptr) {
  if (x.cols() < 2) throw DomainError("layer_norm: rows need at least 2 columns, got " + x.shape_string());
  if ((gain && gain->size() != x.cols()) || (bias && bias->size() != x.cols())) {
    throw ShapeError("layer_norm: affine parameters do not match " + x.shape_string());
  }
  const std::size_t n = x.rows(), d = x.cols();
  Tensor2D xhat(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    auto out = xhat.row(i);
    for (std::size_t k = 0; k < d; ++k) out[k] = (row[k] - mean) * inv_std[i];
  }
  Tensor2D y = xhat;
  if (gain || bias) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k)
        y(i, k) = (gain ? (*gain)[k] : 1.0) * xhat(i, k) + (bias ? (*bias)[k] : 0.0);
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

/// Returns dx; accumulates into the affine gradients when present.
inline Tensor2D layer_norm_backward(const Tensor2D& dy, const LayerNormCache& cache, const Tensor2D* gain = nullptr,
                                    Tensor2D* d_gain = nullptr, Tensor2D* d_bias = nullptr) {
  const Tensor2D& xhat = cache.normalized;
  if (!dy.same_shape(xhat)) throw ShapeError("layer_norm_backward: upstream " + dy.shape_string());
  const std::size_t n = xhat.rows(), d = xhat.cols();
  Tensor2D dx(n, d);
  std::vector<double> g(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      g[k] = dy(i, k) * (gain ? (*gain)[k] : 1.0);
      if (d_gain) (*d_gain)[k] += dy(i, k) * xhat(i, k);
      if (d_bias) (*d_bias)[k] += dy(i, k);
    }
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      mean_g += g[k];
      mean_gx += g[k] * xhat(i, k);
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t k = 0; k < d; ++k) dx(i, k) = cache.inv_std[i] * (g[k] - mean_g - xhat(i, k) * mean_gx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Rectifier and dropout
// ---------------------------------------------------------------------------

inline Tensor2D relu_forward(const Tensor2D& x) {
  Tensor2D y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// Subgradient 0 at x == 0.
inline Tensor2D relu_backward(const Tensor2D& dy, const Tensor2D& x) {
  if (!dy.same_shape(x)) throw ShapeError("relu_backward: shape mismatch");
  Tensor2D dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

/// Inverted dropout; returns the multiplicative mask (0 or 1/(1-rate)).
inline Tensor2D dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  Tensor2D mask(rows, cols, 1.0);
  if (rate <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

inline void multiply_inplace(Tensor2D& x, const Tensor2D& mask) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

// ---------------------------------------------------------------------------
// Mean squared error
// ---------------------------------------------------------------------------

inline double mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ShapeError("mse_loss: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  }
  if (pred.empty()) throw ShapeError("mse_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

inline std::vector<double> mse_backward(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("mse_backward: length mismatch");
  std::vector<double> g(pred.size());
  const double scale = 2.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = scale * (pred[i] - target[i]);
  return g;
}

}  // namespace blp::diff
