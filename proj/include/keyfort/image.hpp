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
#include <cstddef>
#include <string>
#include <vector>

#include "keyfort/errors.hpp"

namespace keyfort {

// Row-major C x h x w pixel array with values in [0,1].
// data[(c*h + y)*w + x]
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w)
      : channels(c), height(h), width(w), data(size_t(c) * h * w, 0.0f) {}

  size_t size() const { return data.size(); }
  float& at(int c, int y, int x) {
    return data[(size_t(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(size_t(c) * height + y) * width + x];
  }
  bool same_dims(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// Boundary check for untrusted pixel data (loaders, CLI inputs). Internal
// gradient buffers reuse the struct but are not pixel images and skip this.
inline void validate_pixel_range(const ImageTensor& x,
                                 const std::string& what) {
  if (x.channels < 1 || x.height < 1 || x.width < 1 ||
      x.data.size() != size_t(x.channels) * x.height * x.width)
    throw validation_error(what + ": inconsistent image dims");
  for (float v : x.data) {
    if (!(v >= 0.0f && v <= 1.0f))
      throw validation_error(what + ": pixel value " + std::to_string(v) +
                             " outside [0,1]");
  }
}

}  // namespace keyfort
