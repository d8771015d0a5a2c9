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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "keyfort/gradcheck.hpp"
#include "keyfort/layers.hpp"

using namespace keyfort;

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed, float scale = 1.0f) {
  SplitMix64 rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.normal()) * scale;
  return v;
}

GradBuf grads_for(std::vector<Param*> params) {
  for (size_t i = 0; i < params.size(); ++i) params[i]->id = int(i);
  GradBuf g;
  g.init(params);
  g.zero();
  return g;
}

}  // namespace

TEST_CASE("linear with identity weights and zero bias is the identity") {
  Linear lin;
  SplitMix64 rng(1);
  lin.init("lin", 4, 4, rng);
  std::fill(lin.w.t.v.begin(), lin.w.t.v.end(), 0.0f);
  for (int i = 0; i < 4; ++i) lin.w.t.v[size_t(i) * 4 + i] = 1.0f;
  std::fill(lin.b.t.v.begin(), lin.b.t.v.end(), 0.0f);
  auto x = random_vec(12, 2);
  std::vector<float> y(12);
  linear_forward(lin, x.data(), 3, y.data());
  for (size_t i = 0; i < 12; ++i) CHECK(y[i] == Catch::Approx(x[i]));
}

TEST_CASE("linear gradients match finite differences on 5 shapes") {
  struct Shape { int rows, in, out; };
  const Shape shapes[] = {{1, 3, 2}, {2, 4, 4}, {3, 5, 2}, {4, 2, 7}, {2, 8, 3}};
  int shape_idx = 0;
  for (const auto& s : shapes) {
    ++shape_idx;
    Linear lin;
    SplitMix64 rng(uint64_t(shape_idx));
    lin.init("lin", s.in, s.out, rng, 0.5f);
    for (auto& b : lin.b.t.v) b = float(rng.normal(0.0, 0.3));
    const auto x = random_vec(size_t(s.rows) * s.in, 100 + uint64_t(shape_idx));
    const auto w = random_vec(size_t(s.rows) * s.out, 200 + uint64_t(shape_idx));

    auto value = [&](const std::vector<float>& xs) {
      std::vector<float> y(size_t(s.rows) * s.out);
      linear_forward(lin, xs.data(), s.rows, y.data());
      double acc = 0.0;
      for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
      return acc;
    };
    GradBuf gb = grads_for({&lin.w, &lin.b});
    std::vector<float> gx(x.size());
    linear_backward(lin, x.data(), s.rows, w.data(), gx.data(), &gb);
    auto rep = grad_check(value, x, gx, 1e-3);
    INFO("input grad, shape " << shape_idx << ": " << rep.max_rel_err);
    CHECK(rep.pass);

    // weight gradient: loss as a function of the flattened weight matrix
    auto wvalue = [&](const std::vector<float>& ws) {
      Linear tmp = lin;
      tmp.w.t.v = ws;
      std::vector<float> y(size_t(s.rows) * s.out);
      linear_forward(tmp, x.data(), s.rows, y.data());
      double acc = 0.0;
      for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
      return acc;
    };
    auto wrep = grad_check(wvalue, lin.w.t.v, gb.of(lin.w).v, 1e-3);
    INFO("weight grad, shape " << shape_idx << ": " << wrep.max_rel_err);
    CHECK(wrep.pass);
  }
}

TEST_CASE("lora-adapted linear gradients match finite differences") {
  Linear lin;
  SplitMix64 rng(9);
  lin.init("lin", 6, 4, rng, 0.4f);
  LoraAdapter a;
  a.rank = 2;
  a.alpha = 4.0f;
  a.down.name = "lin.lora_down";
  a.down.t = Tensor::randn({2, 6}, rng, 0.3f);
  a.up.name = "lin.lora_up";
  a.up.t = Tensor::randn({4, 2}, rng, 0.3f);
  lin.lora = a;
  lin.w.trainable = false;
  lin.b.trainable = false;

  const int rows = 3;
  const auto x = random_vec(18, 10);
  const auto w = random_vec(12, 11);
  GradBuf gb = grads_for({&lin.w, &lin.b, &lin.lora->down, &lin.lora->up});
  std::vector<float> gx(x.size());
  linear_backward(lin, x.data(), rows, w.data(), gx.data(), &gb);

  auto value = [&](const std::vector<float>& xs) {
    std::vector<float> y(12);
    linear_forward(lin, xs.data(), rows, y.data());
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
    return acc;
  };
  CHECK(grad_check(value, x, gx, 1e-3).pass);

  auto dvalue = [&](const std::vector<float>& ds) {
    Linear tmp = lin;
    tmp.lora->down.t.v = ds;
    std::vector<float> y(12);
    linear_forward(tmp, x.data(), rows, y.data());
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
    return acc;
  };
  CHECK(grad_check(dvalue, lin.lora->down.t.v, gb.of(lin.lora->down).v, 1e-3).pass);

  auto uvalue = [&](const std::vector<float>& us) {
    Linear tmp = lin;
    tmp.lora->up.t.v = us;
    std::vector<float> y(12);
    linear_forward(tmp, x.data(), rows, y.data());
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
    return acc;
  };
  CHECK(grad_check(uvalue, lin.lora->up.t.v, gb.of(lin.lora->up).v, 1e-3).pass);

  // frozen base accumulates nothing
  for (float g : gb.of(lin.w).v) CHECK(g == 0.0f);
}

TEST_CASE("softmax rows sum to one") {
  auto x = random_vec(40, 3, 2.0f);
  softmax_rows(x.data(), 5, 8);
  for (int r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 8; ++c) sum += x[size_t(r) * 8 + c];
    CHECK(std::fabs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("layernorm gradients match finite differences on 5 shapes") {
  const int dims[] = {2, 3, 5, 8, 16};
  int idx = 0;
  for (int d : dims) {
    ++idx;
    LayerNorm ln;
    ln.init("ln", d);
    SplitMix64 rng(uint64_t(idx));
    for (auto& g : ln.gamma.t.v) g = float(rng.normal(1.0, 0.2));
    for (auto& b : ln.beta.t.v) b = float(rng.normal(0.0, 0.2));
    const int rows = 3;
    const auto x = random_vec(size_t(rows) * d, 50 + uint64_t(idx));
    const auto w = random_vec(size_t(rows) * d, 60 + uint64_t(idx));

    auto value = [&](const std::vector<float>& xs) {
      LayerNormCache c;
      std::vector<float> y(xs.size());
      layernorm_forward(ln, xs.data(), rows, c, y.data());
      double acc = 0.0;
      for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
      return acc;
    };
    LayerNormCache c;
    std::vector<float> y(x.size()), gx(x.size());
    layernorm_forward(ln, x.data(), rows, c, y.data());
    GradBuf gb = grads_for({&ln.gamma, &ln.beta});
    layernorm_backward(ln, c, rows, w.data(), gx.data(), &gb);
    auto rep = grad_check(value, x, gx, 1e-3);
    INFO("dim " << d << " err " << rep.max_rel_err);
    CHECK(rep.pass);

    auto gvalue = [&](const std::vector<float>& gs) {
      LayerNorm tmp = ln;
      tmp.gamma.t.v = gs;
      LayerNormCache cc;
      std::vector<float> yy(x.size());
      layernorm_forward(tmp, x.data(), rows, cc, yy.data());
      double acc = 0.0;
      for (size_t i = 0; i < yy.size(); ++i) acc += double(w[i]) * yy[i];
      return acc;
    };
    CHECK(grad_check(gvalue, ln.gamma.t.v, gb.of(ln.gamma).v, 1e-3).pass);
  }
}

TEST_CASE("gelu gradient matches finite differences") {
  const auto x = random_vec(64, 4, 1.5f);
  const auto w = random_vec(64, 5);
  auto value = [&](const std::vector<float>& xs) {
    std::vector<float> y(xs.size());
    gelu_forward(xs.data(), xs.size(), y.data());
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += double(w[i]) * y[i];
    return acc;
  };
  std::vector<float> gx(x.size());
  gelu_backward(x.data(), w.data(), x.size(), gx.data());
  auto rep = grad_check(value, x, gx, 1e-3);
  CHECK(rep.pass);
}

TEST_CASE("attention with one head and identity qkv is softmax averaging") {
  const int T = 4, E = 3;
  // qkv buffer built directly: q = k = v = x per token
  auto x = random_vec(size_t(T) * E, 7);
  Tensor qkv({T, 3 * E});
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e) {
      qkv.v[size_t(t) * 3 * E + e] = x[size_t(t) * E + e];
      qkv.v[size_t(t) * 3 * E + E + e] = x[size_t(t) * E + e];
      qkv.v[size_t(t) * 3 * E + 2 * E + e] = x[size_t(t) * E + e];
    }
  AttentionCache cache;
  attention_core_forward(qkv.data(), T, E, 1, cache);

  // direct computation: out_t = sum_s softmax_s(x_t . x_s / sqrt(E)) x_s
  for (int t = 0; t < T; ++t) {
    std::vector<double> scores(T);
    double mx = -1e30;
    for (int s = 0; s < T; ++s) {
      double dot = 0.0;
      for (int e = 0; e < E; ++e)
        dot += double(x[size_t(t) * E + e]) * double(x[size_t(s) * E + e]);
      scores[size_t(s)] = dot / std::sqrt(double(E));
      mx = std::max(mx, scores[size_t(s)]);
    }
    double z = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      z += s;
    }
    for (int e = 0; e < E; ++e) {
      double expect = 0.0;
      for (int s = 0; s < T; ++s)
        expect += scores[size_t(s)] / z * double(x[size_t(s) * E + e]);
      CHECK(double(cache.ctx.v[size_t(t) * E + e]) ==
            Catch::Approx(expect).margin(1e-5));
    }
  }
}

TEST_CASE("attention core gradients match finite differences on 5 shapes") {
  struct Shape { int T, E, H; };
  const Shape shapes[] = {{2, 2, 1}, {3, 4, 2}, {4, 4, 1}, {5, 6, 3}, {4, 8, 4}};
  int idx = 0;
  for (const auto& s : shapes) {
    ++idx;
    const auto qkv = random_vec(size_t(s.T) * 3 * s.E, 80 + uint64_t(idx));
    const auto w = random_vec(size_t(s.T) * s.E, 90 + uint64_t(idx));
    auto value = [&](const std::vector<float>& q) {
      AttentionCache c;
      attention_core_forward(q.data(), s.T, s.E, s.H, c);
      double acc = 0.0;
      for (size_t i = 0; i < c.ctx.v.size(); ++i)
        acc += double(w[i]) * c.ctx.v[i];
      return acc;
    };
    AttentionCache c;
    attention_core_forward(qkv.data(), s.T, s.E, s.H, c);
    std::vector<float> gqkv(qkv.size());
    std::vector<float> scratch(size_t(s.T) * s.T);
    attention_core_backward(qkv.data(), c, s.T, s.E, s.H, w.data(),
                            gqkv.data(), scratch.data());
    auto rep = grad_check(value, qkv, gqkv, 1e-3);
    INFO("attn shape " << idx << " err " << rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("mean pooling forward/backward") {
  const int T = 5, E = 3;
  const auto x = random_vec(size_t(T) * E, 12);
  std::vector<float> y(E);
  mean_pool_forward(x.data(), T, E, y.data());
  for (int e = 0; e < E; ++e) {
    double acc = 0.0;
    for (int t = 0; t < T; ++t) acc += x[size_t(t) * E + e];
    CHECK(y[size_t(e)] == Catch::Approx(acc / T));
  }
  std::vector<float> gy(E, 1.0f), gx(size_t(T) * E);
  mean_pool_backward(gy.data(), T, E, gx.data());
  for (float g : gx) CHECK(g == Catch::Approx(1.0 / T));
}

TEST_CASE("cross entropy of uniform logits is ln k") {
  for (int k : {2, 5, 10, 100}) {
    std::vector<float> logits(size_t(k), 0.7f);
    const float loss = cross_entropy(logits.data(), k, 0, 0.0f, nullptr);
    CHECK(std::fabs(double(loss) - std::log(double(k))) < 1e-5);
  }
}

TEST_CASE("cross entropy gradient matches finite differences") {
  for (float smoothing : {0.0f, 0.1f}) {
    auto logits = random_vec(8, 21, 2.0f);
    std::vector<float> grad(8);
    cross_entropy(logits.data(), 8, 3, smoothing, grad.data());
    auto value = [&](const std::vector<float>& z) {
      return double(cross_entropy(z.data(), 8, 3, smoothing, nullptr));
    };
    auto rep = grad_check(value, logits, grad, 1e-3);
    INFO("smoothing " << smoothing << " err " << rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("a corrupted backward fails the gradient check") {
  auto logits = random_vec(6, 33);
  std::vector<float> grad(6);
  cross_entropy(logits.data(), 6, 1, 0.0f, grad.data());
  grad[2] += 0.05f;  // deliberate corruption
  auto value = [&](const std::vector<float>& z) {
    return double(cross_entropy(z.data(), 6, 1, 0.0f, nullptr));
  };
  CHECK_FALSE(grad_check(value, logits, grad, 1e-3).pass);
}

TEST_CASE("grad_check flags non-finite probes") {
  std::vector<float> x{1.0f};
  std::vector<float> g{1.0f};
  auto value = [](const std::vector<float>& v) {
    return v[0] > 1.0f ? std::numeric_limits<double>::quiet_NaN()
                       : double(v[0]);
  };
  auto rep = grad_check(value, x, g, 1e-3);
  CHECK_FALSE(rep.pass);
  CHECK(rep.note.find("non-finite") != std::string::npos);
}

TEST_CASE("sum of squares passes at tight tolerance") {
  auto x = random_vec(10, 44);
  std::vector<float> g(10);
  for (size_t i = 0; i < 10; ++i) g[i] = 2.0f * x[i];
  auto value = [](const std::vector<float>& v) {
    double acc = 0.0;
    for (float y : v) acc += double(y) * y;
    return acc;
  };
  CHECK(grad_check(value, x, g, 1e-4).pass);
}
