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

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "keyfort/errors.hpp"
#include "keyfort/rng.hpp"

namespace keyfort {

// Dense row-major float32 tensor. Plain storage; all layer math lives in
// free functions that map onto it.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(numel_of(shape), 0.0f);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
  }

  size_t numel() const { return v.size(); }
  float* data() { return v.data(); }
  const float* data() const { return v.data(); }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, float value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static Tensor randn(std::vector<int> s, SplitMix64& rng,
                      float stddev = 1.0f) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = float(rng.normal() * stddev);
    return t;
  }

  bool all_finite() const {
    for (float x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite())
    throw std::runtime_error(what + ": non-finite values encountered");
}

// ---- GEMM wrappers (Eigen behind the scenes) ----
// All operands are row-major contiguous. beta=0 overwrites c, beta=1
// accumulates into it.

using MatRM =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// c[m,n] = a[m,k] * b[k,n]
inline void matmul_nn(const float* a, const float* b, float* c, int m, int k,
                      int n, float beta = 0.0f) {
  CMapM A(a, m, k), B(b, k, n);
  MapM C(c, m, n);
  if (beta == 0.0f)
    C.noalias() = A * B;
  else
    C.noalias() += A * B;
}

// c[m,n] = a[m,k] * b[n,k]^T
inline void matmul_nt(const float* a, const float* b, float* c, int m, int k,
                      int n, float beta = 0.0f) {
  CMapM A(a, m, k), B(b, n, k);
  MapM C(c, m, n);
  if (beta == 0.0f)
    C.noalias() = A * B.transpose();
  else
    C.noalias() += A * B.transpose();
}

// c[m,n] = a[k,m]^T * b[k,n]
inline void matmul_tn(const float* a, const float* b, float* c, int m, int k,
                      int n, float beta = 0.0f) {
  CMapM A(a, k, m), B(b, k, n);
  MapM C(c, m, n);
  if (beta == 0.0f)
    C.noalias() = A.transpose() * B;
  else
    C.noalias() += A.transpose() * B;
}

}  // namespace keyfort
