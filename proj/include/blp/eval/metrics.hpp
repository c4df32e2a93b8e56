#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "blp/errors.hpp"

namespace blp::eval {

namespace detail {
inline void check_metric_inputs(std::span<const double> truth, std::span<const double> pred, const char* what) {
  if (truth.size() != pred.size()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(truth.size()) + " truths vs " +
                     std::to_string(pred.size()) + " predictions");
  }
  if (truth.empty()) throw DataError(std::string(what) + ": no samples");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!(truth[i] > 0.0)) {
      throw DomainError(std::string(what) + ": truth[" + std::to_string(i) + "] = " + std::to_string(truth[i]) +
                        " is not positive");
    }
  }
}
}  // namespace detail

/// Mean absolute percentage error, as a fraction.
inline double mape(std::span<const double> truth, std::span<const double> pred) {
  detail::check_metric_inputs(truth, pred, "mape");
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) sum += std::abs(truth[i] - pred[i]) / truth[i];
  return sum / static_cast<double>(truth.size());
}

/// Fraction of predictions with |y - yhat| <= alpha * y.
inline double alpha_accuracy(std::span<const double> truth, std::span<const double> pred, double alpha = 0.15) {
  detail::check_metric_inputs(truth, pred, "alpha_accuracy");
  if (!(alpha > 0.0)) throw DomainError("alpha_accuracy: alpha must be positive");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (std::abs(truth[i] - pred[i]) <= alpha * truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

struct Metrics {
  std::size_t n = 0;
  double mape = 0.0;
  double acc = 0.0;
};

inline Metrics compute_metrics(std::span<const double> truth, std::span<const double> pred, double alpha) {
  return {truth.size(), mape(truth, pred), alpha_accuracy(truth, pred, alpha)};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population standard deviation.
inline MeanStd summarize(std::span<const double> xs) {
  if (xs.empty()) throw DataError("summarize: no values");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace blp::eval
