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
#include <optional>
#include <string>
#include <vector>

#include "keyfort/tensor.hpp"

namespace keyfort {

// A named parameter tensor. `id` indexes into externally owned gradient
// buffers so that several workers can accumulate gradients against the same
// read-only parameters.
struct Param {
  std::string name;
  Tensor t;
  bool trainable = true;
  int id = -1;
};

struct GradBuf {
  std::vector<Tensor> g;

  void init(const std::vector<Param*>& params) {
    g.clear();
    g.reserve(params.size());
    for (const Param* p : params) g.emplace_back(p->t.shape);
  }

  void zero() {
    for (auto& t : g) std::fill(t.v.begin(), t.v.end(), 0.0f);
  }

  Tensor& of(const Param& p) { return g[size_t(p.id)]; }

  // this += other, in index order (deterministic reduction)
  void add(const GradBuf& other) {
    for (size_t i = 0; i < g.size(); ++i)
      for (size_t j = 0; j < g[i].v.size(); ++j) g[i].v[j] += other.g[i].v[j];
  }
};

// ---- LoRA ----
// Effective weight W + (alpha/r) * up * down, with down (A) drawn small and
// up (B) zero at attach time so the adapted layer starts exactly at W.
struct LoraAdapter {
  int rank = 0;
  float alpha = 0.0f;
  Param down;  // A: [r, in]
  Param up;    // B: [out, r]

  float scale() const { return alpha / float(rank); }
};

// ---- Linear: y = x W^T + b ----
struct Linear {
  int in = 0, out = 0;
  Param w;  // [out, in]
  Param b;  // [out]
  std::optional<LoraAdapter> lora;

  void init(const std::string& name, int d_in, int d_out, SplitMix64& rng,
            float w_std = 0.02f) {
    in = d_in;
    out = d_out;
    w.name = name + ".w";
    w.t = Tensor::randn({d_out, d_in}, rng, w_std);
    b.name = name + ".b";
    b.t = Tensor::zeros({d_out});
  }
};

inline void linear_forward(const Linear& l, const float* x, int rows,
                           float* y) {
  matmul_nt(x, l.w.t.data(), y, rows, l.in, l.out);
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < l.out; ++o) y[size_t(r) * l.out + o] += l.b.t.v[o];
  if (l.lora) {
    const auto& a = *l.lora;
    std::vector<float> h(size_t(rows) * a.rank);
    matmul_nt(x, a.down.t.data(), h.data(), rows, l.in, a.rank);
    for (auto& v : h) v *= a.scale();
    matmul_nt(h.data(), a.up.t.data(), y, rows, a.rank, l.out, 1.0f);
  }
}

// gx may be null when the input gradient is not needed (first layer); gb
// may be null when only the input gradient is wanted (attack path).
inline void linear_backward(const Linear& l, const float* x, int rows,
                            const float* gy, float* gx, GradBuf* gb) {
  if (gb && l.w.trainable)
    matmul_tn(gy, x, gb->of(l.w).data(), l.out, rows, l.in, 1.0f);
  if (gb && l.b.trainable) {
    float* gbias = gb->of(l.b).data();
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < l.out; ++o) gbias[o] += gy[size_t(r) * l.out + o];
  }
  if (gx) matmul_nn(gy, l.w.t.data(), gx, rows, l.out, l.in);
  if (l.lora) {
    const auto& a = *l.lora;
    const float s = a.scale();
    std::vector<float> gh(size_t(rows) * a.rank);
    matmul_nn(gy, a.up.t.data(), gh.data(), rows, l.out, a.rank);
    for (auto& v : gh) v *= s;
    if (gb) {
      // recompute the rank-r activations; cheaper than caching them
      std::vector<float> h(size_t(rows) * a.rank);
      matmul_nt(x, a.down.t.data(), h.data(), rows, l.in, a.rank);
      if (a.up.trainable) {
        std::vector<float> gup(size_t(l.out) * a.rank);
        matmul_tn(gy, h.data(), gup.data(), l.out, rows, a.rank);
        float* dst = gb->of(a.up).data();
        for (size_t i = 0; i < gup.size(); ++i) dst[i] += s * gup[i];
      }
      if (a.down.trainable)
        matmul_tn(gh.data(), x, gb->of(a.down).data(), a.rank, rows, l.in,
                  1.0f);
    }
    if (gx) matmul_nn(gh.data(), a.down.t.data(), gx, rows, a.rank, l.in, 1.0f);
  }
}

// ---- LayerNorm over the last dimension ----
struct LayerNorm {
  int dim = 0;
  float eps = 1e-5f;
  Param gamma;
  Param beta;

  void init(const std::string& name, int d) {
    dim = d;
    gamma.name = name + ".g";
    gamma.t = Tensor::full({d}, 1.0f);
    beta.name = name + ".b";
    beta.t = Tensor::zeros({d});
  }
};

struct LayerNormCache {
  Tensor xhat;  // [rows, dim]
  Tensor rstd;  // [rows]
};

inline void layernorm_forward(const LayerNorm& ln, const float* x, int rows,
                              LayerNormCache& c, float* y) {
  c.xhat = Tensor({rows, ln.dim});
  c.rstd = Tensor({rows});
  const int d = ln.dim;
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + size_t(r) * d;
    float mean = 0.0f;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= float(d);
    float var = 0.0f;
    for (int i = 0; i < d; ++i) {
      const float dl = xr[i] - mean;
      var += dl * dl;
    }
    var /= float(d);
    const float rstd = 1.0f / std::sqrt(var + ln.eps);
    c.rstd.v[r] = rstd;
    float* xh = c.xhat.data() + size_t(r) * d;
    float* yr = y + size_t(r) * d;
    for (int i = 0; i < d; ++i) {
      xh[i] = (xr[i] - mean) * rstd;
      yr[i] = ln.gamma.t.v[i] * xh[i] + ln.beta.t.v[i];
    }
  }
}

inline void layernorm_backward(const LayerNorm& ln, const LayerNormCache& c,
                               int rows, const float* gy, float* gx,
                               GradBuf* gb) {
  const int d = ln.dim;
  float* ggamma =
      (gb && ln.gamma.trainable) ? gb->of(ln.gamma).data() : nullptr;
  float* gbeta = (gb && ln.beta.trainable) ? gb->of(ln.beta).data() : nullptr;
  for (int r = 0; r < rows; ++r) {
    const float* gyr = gy + size_t(r) * d;
    const float* xh = c.xhat.data() + size_t(r) * d;
    const float rstd = c.rstd.v[r];
    float sum_g = 0.0f, sum_gx = 0.0f;
    for (int i = 0; i < d; ++i) {
      const float gxh = gyr[i] * ln.gamma.t.v[i];
      sum_g += gxh;
      sum_gx += gxh * xh[i];
      if (ggamma) ggamma[i] += gyr[i] * xh[i];
      if (gbeta) gbeta[i] += gyr[i];
    }
    const float inv_d = 1.0f / float(d);
    float* gxr = gx + size_t(r) * d;
    for (int i = 0; i < d; ++i) {
      const float gxh = gyr[i] * ln.gamma.t.v[i];
      gxr[i] = rstd * (gxh - inv_d * sum_g - xh[i] * inv_d * sum_gx);
    }
  }
}

// ---- GELU (tanh form) ----
// y = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
inline constexpr float kGeluK = 0.044715f;

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluK * x * x * x)));
}

inline float gelu_grad(float x) {
  const float u = kGeluC * (x + kGeluK * x * x * x);
  const float t = std::tanh(u);
  const float du = kGeluC * (1.0f + 3.0f * kGeluK * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

inline void gelu_forward(const float* x, size_t n, float* y) {
  Eigen::Map<const Eigen::ArrayXf> X(x, Eigen::Index(n));
  Eigen::Map<Eigen::ArrayXf> Y(y, Eigen::Index(n));
  Y = 0.5f * X * (1.0f + (kGeluC * (X + kGeluK * X.cube())).tanh());
}

inline void gelu_backward(const float* x, const float* gy, size_t n,
                          float* gx) {
  Eigen::Map<const Eigen::ArrayXf> X(x, Eigen::Index(n));
  Eigen::Map<const Eigen::ArrayXf> GY(gy, Eigen::Index(n));
  Eigen::Map<Eigen::ArrayXf> GX(gx, Eigen::Index(n));
  Eigen::ArrayXf t = (kGeluC * (X + kGeluK * X.cube())).tanh();
  GX = GY * (0.5f * (1.0f + t) +
             0.5f * X * (1.0f - t.square()) *
                 (kGeluC * (1.0f + 3.0f * kGeluK * X.square())));
}

// ---- Softmax over rows ----
inline void softmax_rows(float* x, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    Eigen::Map<Eigen::ArrayXf> xr(x + size_t(r) * cols, cols);
    xr = (xr - xr.maxCoeff()).exp();
    xr *= 1.0f / xr.sum();
  }
}

// gx = p * (gy - sum(gy * p)) per row, where p is the softmax output.
inline void softmax_backward_rows(const float* p, const float* gy, int rows,
                                  int cols, float* gx) {
  for (int r = 0; r < rows; ++r) {
    const float* pr = p + size_t(r) * cols;
    const float* gr = gy + size_t(r) * cols;
    float dot = 0.0f;
    for (int i = 0; i < cols; ++i) dot += gr[i] * pr[i];
    float* gxr = gx + size_t(r) * cols;
    for (int i = 0; i < cols; ++i) gxr[i] = pr[i] * (gr[i] - dot);
  }
}

// ---- Multi-head self-attention core (fused qkv buffer) ----
// qkv: [T, 3E] laid out per token as [q | k | v]; heads are contiguous
// slices of width E/H inside each third.
struct AttentionCache {
  Tensor qkv;    // [T, 3E]
  Tensor probs;  // [H, T, T] softmax rows
  Tensor ctx;    // [T, E] heads concatenated, pre-projection
};

namespace detail {
using StrideRM = Eigen::OuterStride<>;
using SMap = Eigen::Map<MatRM, 0, StrideRM>;
using CSMap = Eigen::Map<const MatRM, 0, StrideRM>;
}  // namespace detail

inline void attention_core_forward(const float* qkv, int tokens, int embed,
                                   int heads, AttentionCache& c) {
  const int dh = embed / heads;
  const float alpha = 1.0f / std::sqrt(float(dh));
  c.probs = Tensor({heads, tokens, tokens});
  c.ctx = Tensor({tokens, embed});
  for (int h = 0; h < heads; ++h) {
    detail::CSMap Q(qkv + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    detail::CSMap K(qkv + size_t(embed) + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    detail::CSMap V(qkv + size_t(2) * embed + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    MapM S(c.probs.data() + size_t(h) * tokens * tokens, tokens, tokens);
    S.noalias() = Q * K.transpose() * alpha;
    softmax_rows(S.data(), tokens, tokens);
    detail::SMap ctx_h(c.ctx.data() + size_t(h) * dh, tokens, dh,
                       detail::StrideRM(embed));
    ctx_h.noalias() = S * V;
  }
}

// gctx -> gqkv; scratch must hold tokens*tokens floats.
inline void attention_core_backward(const float* qkv, const AttentionCache& c,
                                    int tokens, int embed, int heads,
                                    const float* gctx, float* gqkv,
                                    float* scratch) {
  const int dh = embed / heads;
  const float alpha = 1.0f / std::sqrt(float(dh));
  std::fill(gqkv, gqkv + size_t(tokens) * 3 * embed, 0.0f);
  for (int h = 0; h < heads; ++h) {
    detail::CSMap Q(qkv + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    detail::CSMap K(qkv + size_t(embed) + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    detail::CSMap V(qkv + size_t(2) * embed + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    detail::CSMap gctx_h(gctx + size_t(h) * dh, tokens, dh,
                         detail::StrideRM(embed));
    const float* probs = c.probs.data() + size_t(h) * tokens * tokens;
    CMapM P(probs, tokens, tokens);

    detail::SMap gV(gqkv + size_t(2) * embed + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    gV.noalias() = P.transpose() * gctx_h;

    // dP then dS (softmax backward) in the scratch buffer
    MapM gS(scratch, tokens, tokens);
    gS.noalias() = gctx_h * V.transpose();
    softmax_backward_rows(probs, scratch, tokens, tokens, scratch);

    detail::SMap gQ(gqkv + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    gQ.noalias() = gS * K * alpha;
    detail::SMap gK(gqkv + size_t(embed) + size_t(h) * dh, tokens, dh,
                    detail::StrideRM(3 * embed));
    gK.noalias() = gS.transpose() * Q * alpha;
  }
}

// ---- Mean pooling over tokens ----
inline void mean_pool_forward(const float* x, int tokens, int dim, float* y) {
  for (int i = 0; i < dim; ++i) y[i] = 0.0f;
  for (int t = 0; t < tokens; ++t)
    for (int i = 0; i < dim; ++i) y[i] += x[size_t(t) * dim + i];
  const float inv = 1.0f / float(tokens);
  for (int i = 0; i < dim; ++i) y[i] *= inv;
}

inline void mean_pool_backward(const float* gy, int tokens, int dim,
                               float* gx) {
  const float inv = 1.0f / float(tokens);
  for (int t = 0; t < tokens; ++t)
    for (int i = 0; i < dim; ++i) gx[size_t(t) * dim + i] = gy[i] * inv;
}

// ---- Cross-entropy from logits, with label smoothing ----
// Targets q_i = s/k + (1-s)*[i==y]; loss = logsumexp(z) - sum q_i z_i and
// dloss/dz = softmax(z) - q.
inline float cross_entropy(const float* logits, int k, int label,
                           float smoothing, float* grad) {
  float mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += std::exp(double(logits[i]) - mx);
  const double lse = std::log(sum) + mx;
  const float uniform = smoothing / float(k);
  double loss = 0.0;
  for (int i = 0; i < k; ++i) {
    const float q = uniform + (i == label ? 1.0f - smoothing : 0.0f);
    loss += double(q) * (lse - double(logits[i]));
    if (grad) {
      const float p = float(std::exp(double(logits[i]) - lse));
      grad[i] = p - q;
    }
  }
  return float(loss);
}

inline int argmax(const float* x, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

}  // namespace keyfort
