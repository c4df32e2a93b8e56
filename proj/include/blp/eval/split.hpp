#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <cmath>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "blp/preprocess.hpp"
#include "blp/random.hpp"

namespace blp::eval {

enum class SplitTag { Train, Val, Test };

inline const char* to_string(SplitTag t) {
  switch (t) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
  }
  return "?";
}

struct SplitOptions {
  double train = 0.6;
  double val = 0.2;
  /// Split individual samples instead of batteries. Samples of one battery
  /// then leak across splits.
  bool sample_level = false;
  /// Batteries under these conditions all go to test; the rest are split
  /// between train and val in the train:val ratio.
  std::vector<AgingCondition> holdout;
};

struct SplitAssignment {
  std::vector<SplitTag> tags;  // one per sample
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(SplitTag t) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == t) out.push_back(i);
    return out;
  }
};

/// Slices n shuffled units into train/val/test counts by rounding.
inline std::array<std::size_t, 2> split_counts(std::size_t n, double train, double val) {
  const auto n_train = static_cast<std::size_t>(std::lround(train * static_cast<double>(n)));
  const auto n_val = std::min(n - std::min(n, n_train), static_cast<std::size_t>(std::lround(val * static_cast<double>(n))));
  return {std::min(n, n_train), n_val};
}

inline SplitAssignment split_dataset(std::span<const prep::SampleTensor> samples, std::uint64_t seed,
                                     const SplitOptions& opt = {}) {
  Rng rng(derive_seed(seed, "split"));
  SplitAssignment out;
  out.seed = seed;
  out.tags.assign(samples.size(), SplitTag::Train);

  if (opt.sample_level) {
    if (samples.size() < 5) throw DataError("split: need at least 5 samples, have " + std::to_string(samples.size()));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    const auto [n_train, n_val] = split_counts(order.size(), opt.train, opt.val);
    for (std::size_t k = 0; k < order.size(); ++k) {
      out.tags[order[k]] = k < n_train ? SplitTag::Train : k < n_train + n_val ? SplitTag::Val : SplitTag::Test;
    }
    return out;
  }

  std::set<std::string> ids;
  std::set<std::string> held;
  for (const auto& s : samples) {
    ids.insert(s.battery_id());
    if (std::find(opt.holdout.begin(), opt.holdout.end(), s.condition()) != opt.holdout.end()) {
      held.insert(s.battery_id());
    }
  }
  if (ids.size() < 5) throw DataError("split: need at least 5 batteries, have " + std::to_string(ids.size()));

  std::vector<std::string> pool;
  for (const auto& id : ids)
    if (!held.count(id)) pool.push_back(id);
  rng.shuffle(std::span<std::string>(pool));

  std::unordered_map<std::string, SplitTag> tag_of;
  if (opt.holdout.empty()) {
    const auto [n_train, n_val] = split_counts(pool.size(), opt.train, opt.val);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      tag_of[pool[k]] = k < n_train ? SplitTag::Train : k < n_train + n_val ? SplitTag::Val : SplitTag::Test;
    }
  } else {
    if (held.empty()) throw DataError("split: no battery matches the held-out conditions");
    const double frac = opt.train / (opt.train + opt.val);
    const auto [n_train, n_val] = split_counts(pool.size(), frac, 1.0 - frac);
    (void)n_val;
    for (std::size_t k = 0; k < pool.size(); ++k) tag_of[pool[k]] = k < n_train ? SplitTag::Train : SplitTag::Val;
    for (const auto& id : held) tag_of[id] = SplitTag::Test;
  }
  for (std::size_t i = 0; i < samples.size(); ++i) out.tags[i] = tag_of.at(samples[i].battery_id());
  return out;
}

/// Copies of the samples carrying one tag.
inline std::vector<prep::SampleTensor> select(std::span<const prep::SampleTensor> samples, const SplitAssignment& a,
                                              SplitTag t) {
  std::vector<prep::SampleTensor> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (a.tags[i] == t) out.push_back(samples[i]);
  return out;
}

}  // namespace blp::eval
