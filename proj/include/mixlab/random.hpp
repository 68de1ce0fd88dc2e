#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixlab/errors.hpp"

namespace mixlab {

// Seeded generator shared by initialisation, sampling and data shuffling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (stddev == 0.0) return mean;
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  // Integer uniformly drawn from [lo, hi).
  std::size_t uniform_index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi - 1)(engine_);
  }
  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Draws `count` distinct indices with probability proportional to weight,
// without replacement: each draw is proportional to the weights of the
// indices not yet chosen. Zero-weight indices are never returned.
inline std::vector<std::size_t> multinomial_sample(std::span<const double> weights, std::size_t count, Rng& rng) {
  std::size_t positive = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("multinomial_sample: weights must be finite and non-negative");
    positive += w > 0.0;
  }
  if (positive < count)
    throw InputError("multinomial_sample: " + std::to_string(count) + " draws requested but only " + std::to_string(positive) +
                     " indices have positive weight");

  std::vector<double> live(weights.begin(), weights.end());
  std::vector<double> cumulative(live.size());
  auto rebuild = [&] { std::partial_sum(live.begin(), live.end(), cumulative.begin()); };
  rebuild();
  double taken = 0.0;

  std::vector<std::size_t> out;
  out.reserve(count);
  std::vector<char> chosen(live.size(), 0);
  while (out.size() < count) {
    // Rejection against the current table is exact conditioning on "not yet
    // chosen"; rebuild once rejections would dominate.
    if (taken > 0.5 * cumulative.back()) {
      for (std::size_t i = 0; i < live.size(); ++i)
        if (chosen[i]) live[i] = 0.0;
      rebuild();
      taken = 0.0;
    }
    const double u = rng.uniform() * cumulative.back();
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - cumulative.begin());
    if (idx >= live.size()) idx = live.size() - 1;
    while (live[idx] == 0.0 && idx > 0) --idx;  // u landed exactly on a boundary
    if (live[idx] == 0.0 || chosen[idx]) continue;
    chosen[idx] = 1;
    taken += live[idx];
    out.push_back(idx);
  }
  return out;
}

}  // namespace mixlab
