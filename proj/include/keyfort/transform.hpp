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

#include <cstdint>
#include <string>
#include <vector>

#include "keyfort/errors.hpp"
#include "keyfort/image.hpp"
#include "keyfort/key.hpp"

namespace keyfort {

// Block-wise pixel shuffle. The image is tiled into non-overlapping P x P
// blocks; each block is flattened channel-major (all of channel 0's P*P
// pixels row-major, then channel 1, ...) into b, and the output block is
//   b'[k] = b[perm[k]].
// The channel-major flattening order is normative for this toolkit; the
// same key must always produce the same bytes.
//
// Position k within a block decodes as
//   c  = k / (P*P),  r = k % (P*P),  py = r / P,  px = r % P.

inline void check_transform_dims(int channels, int height, int width,
                                 const Key& key) {
  if (key.channels != channels)
    throw validation_error("transform: key has " +
                           std::to_string(key.channels) + " channels, image " +
                           std::to_string(channels));
  const int P = key.block_size;
  if (height % P != 0 || width % P != 0)
    throw validation_error("transform: image " + std::to_string(height) + "x" +
                           std::to_string(width) +
                           " not divisible into " + std::to_string(P) + "x" +
                           std::to_string(P) + " blocks");
}

// Gather map for a whole image: out[i] = in[map[i]]. Building it once and
// reusing it is what the defended forward pass does in hot loops.
class PermutationMap {
 public:
  PermutationMap() = default;

  PermutationMap(const Key& key, int height, int width) {
    validate_key(key);
    check_transform_dims(key.channels, height, width, key);
    const int C = key.channels, P = key.block_size;
    const int pp = P * P;
    forward_.resize(size_t(C) * height * width);
    inverse_.resize(forward_.size());
    auto flat = [&](int c, int y, int x) {
      return (size_t(c) * height + y) * width + x;
    };
    for (int by = 0; by < height / P; ++by) {
      for (int bx = 0; bx < width / P; ++bx) {
        for (int k = 0; k < C * pp; ++k) {
          const uint32_t s = key.perm[k];
          const int kc = k / pp, kr = k % pp;
          const int sc = int(s) / pp, sr = int(s) % pp;
          const size_t dst = flat(kc, by * P + kr / P, bx * P + kr % P);
          const size_t src = flat(sc, by * P + sr / P, bx * P + sr % P);
          forward_[dst] = uint32_t(src);
          inverse_[src] = uint32_t(dst);
        }
      }
    }
  }

  size_t size() const { return forward_.size(); }

  template <typename T>
  void apply(const T* in, T* out) const {
    for (size_t i = 0; i < forward_.size(); ++i) out[i] = in[forward_[i]];
  }

  template <typename T>
  void apply_inverse(const T* in, T* out) const {
    for (size_t i = 0; i < inverse_.size(); ++i) out[i] = in[inverse_[i]];
  }

 private:
  std::vector<uint32_t> forward_;
  std::vector<uint32_t> inverse_;
};

inline ImageTensor transform(const ImageTensor& x, const Key& key) {
  PermutationMap map(key, x.height, x.width);
  ImageTensor out(x.channels, x.height, x.width);
  map.apply(x.data.data(), out.data.data());
  return out;
}

// Exact inverse of transform; diagnostic only, inference never needs it.
inline ImageTensor inverse_transform(const ImageTensor& x, const Key& key) {
  PermutationMap map(key, x.height, x.width);
  ImageTensor out(x.channels, x.height, x.width);
  map.apply_inverse(x.data.data(), out.data.data());
  return out;
}

// Pulls a gradient back through the (linear) shuffle: for y = T x with T a
// permutation matrix, dL/dx = T^-1 dL/dy, i.e. the inverse shuffle applied
// to the incoming gradient. The argument is image-shaped but is a gradient,
// so no [0,1] range applies.
inline ImageTensor backprop_through_transform(const ImageTensor& grad_out,
                                              const Key& key) {
  PermutationMap map(key, grad_out.height, grad_out.width);
  ImageTensor out(grad_out.channels, grad_out.height, grad_out.width);
  map.apply_inverse(grad_out.data.data(), out.data.data());
  return out;
}

}  // namespace keyfort
