// Copyright (c) the KeyFort Project Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace keyfort {

// Portable 64-bit generator (SplitMix64). Every random decision in the
// toolkit funnels through this so that (seed, ...) -> output is bit-exact
// across platforms and library versions. Recurrence:
//   s    += 0x9E3779B97F4A7C15
//   z     = s
//   z     = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z     = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   out   = z ^ (z >> 31)
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Unbiased integer in [0, n) via rejection sampling.
  uint64_t next_below(uint64_t n) {
    // smallest r such that [r, 2^64) maps uniformly onto [0, n)
    const uint64_t min = (0 - n) % n;
    for (;;) {
      uint64_t r = next();
      if (r >= min) return r % n;
    }
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (cosine branch only, so draws stay
  // stateless with respect to each other).
  double normal() {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// Derives an independent stream from (seed, tags...). Used to give each
// example / epoch / worker its own generator without shared state.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag_a, uint64_t tag_b = 0) {
  SplitMix64 g(seed ^ (tag_a * 0xD1B54A32D192ED03ULL) ^
               (tag_b * 0x8CB92BA72F3D8DD7ULL));
  return g.next();
}

}  // namespace keyfort
