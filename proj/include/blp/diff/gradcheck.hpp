#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "blp/diff/parameters.hpp"

namespace blp::diff {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradcheckReport {
  double tolerance = 0.0;
  std::vector<GradcheckEntry> entries;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() <= tolerance; }
};

struct GradcheckOptions {
  double step = 1e-5;
  /// Elements probed per parameter; larger tensors are subsampled.
  std::size_t max_elements = 64;
  std::uint64_t seed = 0;
};

/// Loss closure for check_gradients. Called with `true` it must also add the
/// analytic gradients into params (they are zeroed beforehand); called with
/// `false` it only evaluates the loss at the current values.
using LossClosure = std::function<double(bool with_gradients)>;

/// Central finite differences against analytic gradients. Each element's
/// error is |analytic - numeric| / max(|numeric|, 1e-3 * s), where s is the
/// largest gradient magnitude probed in that parameter; the floor keeps
/// elements with near-zero gradient from amplifying round-off.
inline GradcheckReport check_gradients(const LossClosure& loss, ParameterSet& params, double tolerance,
                                       const GradcheckOptions& opt = {}) {
  params.zero_grad();
  loss(true);
  std::map<std::string, Tensor2D> analytic;
  for (auto& [name, p] : params) analytic.emplace(name, p.grad);
  params.zero_grad();

  GradcheckReport report;
  report.tolerance = tolerance;
  for (auto& [name, p] : params) {
    const std::size_t n = p.value.size();
    std::vector<std::size_t> idx;
    if (n <= opt.max_elements) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      Rng rng(derive_seed(opt.seed, name));
      for (std::size_t k = 0; k < opt.max_elements; ++k) idx.push_back(rng.below(n));
    }
    std::vector<double> num(idx.size()), ana(idx.size());
    double scale = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      double& w = p.value[idx[k]];
      const double saved = w;
      w = saved + opt.step;
      const double up = loss(false);
      w = saved - opt.step;
      const double down = loss(false);
      w = saved;
      num[k] = (up - down) / (2.0 * opt.step);
      ana[k] = analytic.at(name)[idx[k]];
      scale = std::max({scale, std::abs(num[k]), std::abs(ana[k])});
    }
    GradcheckEntry entry{name, 0.0, idx.size()};
    const double floor = std::max(1e-3 * scale, 1e-300);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double err = std::abs(ana[k] - num[k]) / std::max(std::abs(num[k]), floor);
      entry.max_rel_error = std::max(entry.max_rel_error, err);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace blp::diff
