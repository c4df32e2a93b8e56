#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "blp/diff/tensor.hpp"
#include "blp/errors.hpp"

namespace blp::eval {

using diff::Tensor2D;

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

inline void check_mmd(const Tensor2D& x, const Tensor2D& y) {
  if (x.rows() == 0 || y.rows() == 0) throw DataError("mmd: both sets need at least one row");
  if (x.cols() != y.cols()) throw ShapeError("mmd: widths differ, " + x.shape_string() + " vs " + y.shape_string());
}

/// Sum of a list of terms in ascending order, so the result does not depend
/// on the order in which the terms were produced.
inline double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

/// Median of pairwise Euclidean distances over the pooled rows of x and y;
/// 1 when that median is zero.
inline double median_bandwidth(const Tensor2D& x, const Tensor2D& y) {
  detail::check_mmd(x, y);
  std::vector<std::span<const double>> rows;
  for (std::size_t i = 0; i < x.rows(); ++i) rows.push_back(x.row(i));
  for (std::size_t i = 0; i < y.rows(); ++i) rows.push_back(y.row(i));
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) d.push_back(std::sqrt(detail::sq_dist(rows[i], rows[j])));
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  const double med = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  return med > 0.0 ? med : 1.0;
}

struct MmdResult {
  double value = 0.0;
  double bandwidth = 1.0;
  Tensor2D dx;  // filled when gradients are requested
  Tensor2D dy;
};

/// Biased squared MMD with a Gaussian kernel exp(-|a-b|^2 / (2 h^2)) at a
/// fixed bandwidth h. Gradients treat h as a constant.
inline MmdResult mmd_squared_fixed(const Tensor2D& x, const Tensor2D& y, double bandwidth, bool with_gradients) {
  detail::check_mmd(x, y);
  if (!(bandwidth > 0.0)) throw DomainError("mmd: bandwidth must be positive");
  const double n = static_cast<double>(x.rows()), m = static_cast<double>(y.rows());
  const double inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  const double invh2 = 1.0 / (bandwidth * bandwidth);
  auto kern = [&](std::span<const double> a, std::span<const double> b) { return std::exp(-detail::sq_dist(a, b) * inv2h2); };

  MmdResult r;
  r.bandwidth = bandwidth;
  if (with_gradients) {
    r.dx = Tensor2D(x.rows(), x.cols());
    r.dy = Tensor2D(y.rows(), y.cols());
  }
  const std::size_t d = x.cols();

  std::vector<double> kxx, kyy, kxy;
  kxx.reserve(x.rows() * x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.rows(); ++j) {
      const double k = kern(x.row(i), x.row(j));
      kxx.push_back(k);
      if (with_gradients && i != j) {
        // d/dx_i of k(x_i, x_j) appears twice in the double sum
        const double c = -2.0 * k * invh2 / (n * n);
        for (std::size_t t = 0; t < d; ++t) r.dx(i, t) += c * (x(i, t) - x(j, t));
      }
    }
  }
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) {
      const double k = kern(y.row(i), y.row(j));
      kyy.push_back(k);
      if (with_gradients && i != j) {
        const double c = -2.0 * k * invh2 / (m * m);
        for (std::size_t t = 0; t < d; ++t) r.dy(i, t) += c * (y(i, t) - y(j, t));
      }
    }
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) {
      const double k = kern(x.row(i), y.row(j));
      kxy.push_back(k);
      if (with_gradients) {
        const double c = 2.0 * k * invh2 / (n * m);
        for (std::size_t t = 0; t < d; ++t) {
          const double diff = x(i, t) - y(j, t);
          r.dx(i, t) += c * diff;
          r.dy(j, t) -= c * diff;
        }
      }
    }
  }
  r.value = detail::sorted_sum(kxx) / (n * n) + detail::sorted_sum(kyy) / (m * m) -
            2.0 * detail::sorted_sum(kxy) / (n * m);
  return r;
}

/// Biased squared MMD with the median-heuristic bandwidth.
inline MmdResult mmd_squared(const Tensor2D& x, const Tensor2D& y, bool with_gradients = false) {
  return mmd_squared_fixed(x, y, median_bandwidth(x, y), with_gradients);
}

}  // namespace blp::eval
