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

// Deterministic synthetic image corpus in the exact CIFAR-10 binary batch
// layout (and a small IDX set), for test environments without the real
// data.
//
// Class identity is an angle on a ring inside the span of two fixed
// high-frequency waves; most pixel variance comes from class-neutral
// low-frequency background waves and noise. Every example therefore has a
// rival class a short distance away along the ring (small margins, the
// regime norm-bounded attacks need), while random or transferred
// perturbations barely project onto the two discriminative directions.

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "keyfort/dataset.hpp"
#include "keyfort/rng.hpp"

namespace keyfort::synth {

inline constexpr float kTau = 6.28318530717958647692f;

struct CorpusParams {
  int dim = 32;
  int channels = 3;
  int classes = 10;
  float ring_radius = 3.5f;  // class signal in L2 units of pixel space
  float angle_noise = 0.06f; // per-sample angular jitter (radians)
  int bg_pool = 8;           // class-neutral low-frequency background pool
  float bg_amp = 0.10f;      // per-sample background weight sigma
  float noise = 0.04f;       // pixel noise amplitude
  float jitter = 0.20f;      // radius jitter fraction
};

class Generator {
 public:
  Generator(uint64_t seed, CorpusParams params = {})
      : p_(params), rng_(seed) {
    // two fixed high-frequency ring waves (distinct frequencies keep them
    // orthogonal to each other and to the low-frequency background)
    ring_a_ = build_wave(5, 8, float(rng_.uniform(0.0, double(kTau))));
    ring_b_ = build_wave(11, 6, float(rng_.uniform(0.0, double(kTau))));
    normalize(ring_a_);
    normalize(ring_b_);
    bg_.resize(size_t(p_.bg_pool));
    for (auto& w : bg_) {
      const int fx = int(rng_.next_below(3)) + 1;
      const int fy = int(rng_.next_below(3)) + 1;
      w = build_wave(rng_.next() & 1 ? fx : -fx, fy,
                     float(rng_.uniform(0.0, double(kTau))));
    }
  }

  // One sample of `label` into a u8 pixel block (channel-major dim x dim).
  void sample(int label, uint64_t sample_seed, uint8_t* out) const {
    SplitMix64 rng(sample_seed);
    const int D = p_.dim;
    const size_t plane = size_t(D) * D;
    const float theta = kTau * float(label) / float(p_.classes) +
                        p_.angle_noise * float(rng.normal());
    const float radius =
        p_.ring_radius * float(1.0 + p_.jitter * (2.0 * rng.uniform() - 1.0));
    const float wa = radius * std::cos(theta);
    const float wb = radius * std::sin(theta);
    std::vector<float> bg_w(bg_.size());
    for (auto& v : bg_w) v = p_.bg_amp * float(rng.normal());

    const float noise_scale = p_.noise * 1.2247f;  // triangular, same sigma
    for (int c = 0; c < p_.channels; ++c) {
      const size_t coff = size_t(c % 3) * plane;
      for (size_t i = 0; i < plane; ++i) {
        float v = 0.5f + wa * ring_a_[coff + i] + wb * ring_b_[coff + i];
        for (size_t k = 0; k < bg_.size(); ++k)
          v += bg_w[k] * bg_[k][coff + i];
        v += noise_scale * float(rng.uniform() + rng.uniform() - 1.0);
        v = std::min(1.0f, std::max(0.0f, v));
        out[size_t(c) * plane + i] = uint8_t(std::lround(v * 255.0f));
      }
    }
  }

  // Balanced, label-shuffled dataset of n_per_class examples per class.
  Dataset make_split(const std::string& split, int n_per_class,
                     uint64_t seed) const {
    Dataset ds;
    ds.split = split;
    ds.channels = p_.channels;
    ds.height = p_.dim;
    ds.width = p_.dim;
    ds.num_classes = p_.classes;
    const size_t n = size_t(n_per_class) * size_t(p_.classes);
    std::vector<int> labels(n);
    for (size_t i = 0; i < n; ++i) labels[i] = int(i % size_t(p_.classes));
    SplitMix64 rng(derive_seed(seed, 0x0DDBA11u));
    rng.shuffle(labels);
    ds.labels = labels;
    ds.pixels.resize(n * ds.image_bytes());
    for (size_t i = 0; i < n; ++i)
      sample(labels[i], derive_seed(seed, 0x5A17u, i),
             ds.pixels.data() + i * ds.image_bytes());
    return ds;
  }

 private:
  // 3-channel wave pattern, symmetric under horizontal flip (x -> D-1-x) so
  // the training-time flip augmentation is label-preserving by construction.
  std::vector<float> build_wave(int fx, int fy, float phase) {
    const int D = p_.dim;
    const size_t plane = size_t(D) * D;
    std::vector<float> w(3 * plane);
    float amp[3];
    for (int c = 0; c < 3; ++c) amp[c] = float(rng_.normal());
    const float center = float(D - 1) / 2.0f;
    for (int y = 0; y < D; ++y)
      for (int x = 0; x < D; ++x) {
        const float a = kTau / float(D) * float(fx) * (float(x) - center);
        const float b = kTau / float(D) * float(fy) * float(y) + phase;
        const float v = std::cos(a) * std::cos(b);
        for (int c = 0; c < 3; ++c)
          w[size_t(c) * plane + size_t(y) * D + x] = amp[c] * v;
      }
    return w;
  }

  static void normalize(std::vector<float>& w) {
    double s = 0.0;
    for (float v : w) s += double(v) * v;
    const float inv = float(1.0 / std::sqrt(s));
    for (auto& v : w) v *= inv;
  }

  CorpusParams p_;
  SplitMix64 rng_;
  std::vector<float> ring_a_, ring_b_;
  std::vector<std::vector<float>> bg_;
};

// Full CIFAR-10-format corpus: 5 train batches + test batch.
inline void write_cifar_corpus(const std::string& dir, uint64_t seed,
                               int train_per_class = 5000,
                               int test_per_class = 1000) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Generator gen(seed);
  Dataset train =
      gen.make_split("train", train_per_class, derive_seed(seed, 0x7121u));
  Dataset test =
      gen.make_split("test", test_per_class, derive_seed(seed, 0x7e57u));
  const size_t per_batch = train.size() / 5;
  for (int b = 0; b < 5; ++b)
    write_cifar_batch(
        (fs::path(dir) / ("data_batch_" + std::to_string(b + 1) + ".bin"))
            .string(),
        train, size_t(b) * per_batch, per_batch);
  write_cifar_batch((fs::path(dir) / "test_batch.bin").string(), test, 0,
                    test.size());
}

// Small grayscale IDX pair (MNIST file layout).
inline void write_idx_corpus(const std::string& dir, uint64_t seed,
                             int train_n = 510, int test_n = 250,
                             int dim = 28) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  CorpusParams p;
  p.dim = dim;
  p.channels = 1;
  Generator gen(seed, p);
  Dataset train =
      gen.make_split("train", train_n / 10, derive_seed(seed, 0x1D1u));
  Dataset test = gen.make_split("test", test_n / 10, derive_seed(seed, 0x1D2u));
  write_idx(train, (fs::path(dir) / "train-images-idx3-ubyte").string(),
            (fs::path(dir) / "train-labels-idx1-ubyte").string());
  write_idx(test, (fs::path(dir) / "t10k-images-idx3-ubyte").string(),
            (fs::path(dir) / "t10k-labels-idx1-ubyte").string());
}

}  // namespace keyfort::synth
