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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>

#include "keyfort/gradcheck.hpp"
#include "keyfort/transform.hpp"

using namespace keyfort;

namespace {

ImageTensor random_image(int c, int h, int w, uint64_t seed) {
  ImageTensor x(c, h, w);
  SplitMix64 rng(seed);
  for (auto& v : x.data) v = float(rng.uniform());
  return x;
}

}  // namespace

TEST_CASE("single-block hand case: perm (3,2,1,0) reverses the block") {
  // 2x2 single-channel block, input (a,b,c,d) row-major
  Key key;
  key.block_size = 2;
  key.channels = 1;
  key.perm = {3, 2, 1, 0};
  ImageTensor x(1, 2, 2);
  x.data = {0.1f, 0.2f, 0.3f, 0.4f};  // a b / c d
  ImageTensor y = transform(x, key);
  CHECK(y.data == std::vector<float>{0.4f, 0.3f, 0.2f, 0.1f});
  ImageTensor back = inverse_transform(y, key);
  CHECK(back.data == x.data);
}

TEST_CASE("constant images are fixed points of any key") {
  Key key = generate_key(9, 4, 3);
  ImageTensor x(3, 8, 8);
  std::fill(x.data.begin(), x.data.end(), 0.5f);
  ImageTensor y = transform(x, key);
  CHECK(y.data == x.data);
}

TEST_CASE("identity key is the identity map") {
  Key key = identity_key(4, 3);
  ImageTensor x = random_image(3, 8, 8, 1);
  CHECK(transform(x, key).data == x.data);
  CHECK(inverse_transform(x, key).data == x.data);
}

TEST_CASE("channel-major flattening order is normative") {
  // C=2, P=2: block vector k = c*4 + py*2 + px. perm swapping k=0 (ch0
  // top-left) with k=4 (ch1 top-left) must swap exactly those two pixels.
  Key key = identity_key(2, 2);
  std::swap(key.perm[0], key.perm[4]);
  ImageTensor x(2, 2, 2);
  for (size_t i = 0; i < 8; ++i) x.data[i] = float(i) / 8.0f;
  ImageTensor y = transform(x, key);
  CHECK(y.at(0, 0, 0) == x.at(1, 0, 0));
  CHECK(y.at(1, 0, 0) == x.at(0, 0, 0));
  CHECK(y.at(0, 0, 1) == x.at(0, 0, 1));
  CHECK(y.at(1, 1, 1) == x.at(1, 1, 1));
}

TEST_CASE("round trip is bit-exact over random images and keys") {
  SplitMix64 rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    const int P = int(rng.next_below(3)) * 2 + 2;  // 2, 4, 6
    const int C = rng.next() & 1 ? 3 : 1;
    const int h = P * int(1 + rng.next_below(4));
    const int w = P * int(1 + rng.next_below(4));
    Key key = generate_key(rng.next(), P, C);
    ImageTensor x = random_image(C, h, w, rng.next());
    ImageTensor y = transform(x, key);
    ImageTensor back = inverse_transform(y, key);
    REQUIRE(back.data == x.data);
  }
}

TEST_CASE("per-block value multisets are preserved") {
  Key key = generate_key(5, 4, 3);
  ImageTensor x = random_image(3, 12, 8, 77);
  ImageTensor y = transform(x, key);
  const int P = 4;
  for (int by = 0; by < x.height / P; ++by)
    for (int bx = 0; bx < x.width / P; ++bx) {
      std::vector<float> a, b;
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px) {
            a.push_back(x.at(c, by * P + py, bx * P + px));
            b.push_back(y.at(c, by * P + py, bx * P + px));
          }
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      REQUIRE(a == b);
    }
}

TEST_CASE("different seeds give visibly different outputs") {
  // key sensitivity over 100 seed pairs
  ImageTensor x = random_image(3, 8, 8, 42);
  size_t differing = 0;
  for (uint64_t s = 0; s < 100; ++s) {
    Key k1 = generate_key(2 * s, 4, 3);
    Key k2 = generate_key(2 * s + 1, 4, 3);
    if (transform(x, k1).data != transform(x, k2).data) ++differing;
  }
  CHECK(differing == 100);
}

TEST_CASE("dimension and channel mismatches are rejected") {
  Key key = generate_key(3, 4, 3);
  ImageTensor bad_dims = random_image(3, 10, 8, 1);  // 10 % 4 != 0
  CHECK_THROWS_AS(transform(bad_dims, key), validation_error);
  ImageTensor bad_channels = random_image(1, 8, 8, 1);
  CHECK_THROWS_AS(transform(bad_channels, key), validation_error);
  CHECK_THROWS_AS(backprop_through_transform(bad_dims, key),
                  validation_error);
}

TEST_CASE("backprop with identity key leaves the gradient unchanged") {
  Key key = identity_key(4, 3);
  ImageTensor g = random_image(3, 8, 8, 5);
  CHECK(backprop_through_transform(g, key).data == g.data);
}

TEST_CASE("backprop routes a one-hot gradient to the pre-image position") {
  // 4x4 single-channel image, P=2: enumerate all output positions
  Key key = generate_key(11, 2, 1);
  PermutationMap map(key, 4, 4);
  ImageTensor x = random_image(1, 4, 4, 3);
  ImageTensor y = transform(x, key);
  for (size_t out_pos = 0; out_pos < 16; ++out_pos) {
    ImageTensor g(1, 4, 4);
    g.data[out_pos] = 1.0f;
    ImageTensor gx = backprop_through_transform(g, key);
    // transform reads y[out_pos] from some source pixel; the gradient of
    // y[out_pos] w.r.t. exactly that pixel is 1
    size_t hits = 0, src = 0;
    for (size_t i = 0; i < 16; ++i)
      if (gx.data[i] == 1.0f) {
        ++hits;
        src = i;
      }
    REQUIRE(hits == 1);
    CHECK(y.data[out_pos] == x.data[src]);
  }
}

TEST_CASE("backprop agrees with central finite differences") {
  // dyadic grid values and step keep the float arithmetic exact, so the
  // linear map's finite differences match analytically
  Key key = generate_key(21, 4, 3);
  ImageTensor x(3, 8, 8);
  SplitMix64 rng(8);
  for (auto& v : x.data) v = float(rng.next_below(512)) / 1024.0f;
  // scalar loss: fixed random weighting of the transformed image
  std::vector<float> w(x.data.size());
  for (auto& v : w) v = float(rng.next_below(1024)) / 512.0f - 1.0f;

  auto loss_at = [&](const std::vector<float>& pixels) {
    ImageTensor t(3, 8, 8);
    t.data = pixels;
    ImageTensor y = transform(t, key);
    double acc = 0.0;
    for (size_t i = 0; i < y.data.size(); ++i)
      acc += double(w[i]) * double(y.data[i]);
    return acc;
  };

  // analytic gradient: pull w back through the transform
  ImageTensor gw(3, 8, 8);
  gw.data = w;
  ImageTensor analytic = backprop_through_transform(gw, key);

  auto rep = grad_check(loss_at, x.data, analytic.data, 1e-6, 0x1.0p-8);
  INFO(rep.note);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("forward and inverse maps are mutually inverse as indices") {
  Key key = generate_key(6, 4, 3);
  PermutationMap map(key, 8, 8);
  std::vector<float> v(map.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = float(i);
  std::vector<float> f(v.size()), b(v.size());
  map.apply(v.data(), f.data());
  map.apply_inverse(f.data(), b.data());
  CHECK(b == v);
}
