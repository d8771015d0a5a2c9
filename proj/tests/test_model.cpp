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

#include "keyfort/gradcheck.hpp"
#include "keyfort/model.hpp"

using namespace keyfort;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_h = 8;
  c.image_w = 8;
  c.channels = 3;
  c.vit_patch = 4;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_blocks = 2;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

ImageTensor random_image(const ModelConfig& c, uint64_t seed) {
  ImageTensor x(c.channels, c.image_h, c.image_w);
  SplitMix64 rng(seed);
  for (auto& v : x.data) v = float(rng.uniform());
  return x;
}

}  // namespace

TEST_CASE("forward produces num_classes logits, deterministically") {
  VitModel m;
  m.init(tiny_config(), 3);
  ImageTensor x = random_image(m.cfg, 1);
  auto a = forward_plain(x, m);
  auto b = forward_plain(x, m);
  CHECK(a.size() == 4);
  CHECK(a == b);
}

TEST_CASE("zero classifier head gives all-equal logits") {
  VitModel m;
  m.init(tiny_config(), 3);
  std::fill(m.head.w.t.v.begin(), m.head.w.t.v.end(), 0.0f);
  std::fill(m.head.b.t.v.begin(), m.head.b.t.v.end(), 0.0f);
  auto lg = forward_plain(random_image(m.cfg, 2), m);
  for (float v : lg) CHECK(v == lg[0]);
}

TEST_CASE("identity key defended forward equals plain forward bit-exactly") {
  VitModel m;
  m.init(tiny_config(), 4);
  Key key = identity_key(4, 3);
  ImageTensor x = random_image(m.cfg, 9);
  auto plain = forward_plain(x, m);
  auto defended = forward_defended(x, m, key);
  CHECK(plain == defended);
}

TEST_CASE("constant images make the defended forward key-invariant") {
  VitModel m;
  m.init(tiny_config(), 4);
  ImageTensor x(m.cfg.channels, m.cfg.image_h, m.cfg.image_w);
  std::fill(x.data.begin(), x.data.end(), 0.25f);
  auto a = forward_defended(x, m, generate_key(1, 4, 3));
  auto b = forward_defended(x, m, generate_key(2, 4, 3));
  CHECK(a == b);
}

TEST_CASE("adding a constant to all logits never changes the argmax") {
  VitModel m;
  m.init(tiny_config(), 5);
  auto lg = forward_plain(random_image(m.cfg, 3), m);
  const int pred = argmax(lg.data(), int(lg.size()));
  for (auto& v : lg) v += 3.25f;
  CHECK(argmax(lg.data(), int(lg.size())) == pred);
}

TEST_CASE("input gradient through the defended pipeline passes FD checks") {
  VitModel m;
  m.init(tiny_config(), 6);
  m.set_normalization({0.4f, 0.5f, 0.6f}, {0.25f, 0.3f, 0.2f});
  Key key = generate_key(77, 4, 3);
  Pipeline pipe(m, &key);
  ImageTensor x = random_image(m.cfg, 10);
  ModelWorkspace ws;
  ImageTensor gx;
  pipe.loss_and_input_grad(x, 2, ws, gx);
  auto value = [&](const std::vector<float>& pixels) {
    ImageTensor t = x;
    t.data = pixels;
    ModelWorkspace w2;
    const float* lg = pipe.logits(t, w2);
    return double(cross_entropy(lg, m.cfg.num_classes, 2, 0.0f, nullptr));
  };
  auto rep = grad_check(value, x.data, gx.data, 1e-3);
  INFO("pipeline input grad err " << rep.max_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("full model parameter gradients pass FD checks (toy shapes)") {
  VitModel m;
  m.init(tiny_config(), 8);
  ImageTensor x = random_image(m.cfg, 11);
  Pipeline pipe(m, nullptr);
  ModelWorkspace ws;
  auto params = m.params();
  GradBuf gb;
  gb.init({params.begin(), params.end()});
  gb.zero();
  pipe.loss_and_param_grads(x, 1, 0.0f, ws, gb);

  // spot-check three parameter tensors end to end
  for (const char* name :
       {"blocks.0.qkv.w", "blocks.1.fc2.b", "patch_embed.w"}) {
    Param* target = nullptr;
    for (Param* p : params)
      if (p->name == name) target = p;
    REQUIRE(target != nullptr);
    auto value = [&](const std::vector<float>& vals) {
      const auto keep = target->t.v;
      const_cast<std::vector<float>&>(target->t.v) = vals;
      ModelWorkspace w2;
      const float* lg = pipe.logits(x, w2);
      const double loss =
          double(cross_entropy(lg, m.cfg.num_classes, 1, 0.0f, nullptr));
      const_cast<std::vector<float>&>(target->t.v) = keep;
      return loss;
    };
    auto rep = grad_check(value, target->t.v, gb.of(*target).v, 1e-3);
    INFO(name << " err " << rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("attach_lora preserves the computed function at init") {
  VitModel m;
  m.init(tiny_config(), 12);
  ImageTensor x = random_image(m.cfg, 13);
  auto before = forward_plain(x, m);
  attach_lora(m, 4, 8.0f, 99);
  auto after = forward_plain(x, m);
  REQUIRE(before.size() == after.size());
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(std::fabs(before[i] - after[i]) <= 1e-6f);
}

TEST_CASE("attach_lora freezes the base and counts trainable params") {
  VitModel m;
  m.init(tiny_config(), 12);
  const auto cfg = m.cfg;
  attach_lora(m, 4, 8.0f, 99);
  CHECK(m.mode == FinetuneMode::lora);
  // closed form: r*(d_in+d_out) per adapted layer + classifier head
  const size_t adapters = lora_adapter_param_count(cfg, 4);
  const size_t head = size_t(cfg.embed_dim) * cfg.num_classes + cfg.num_classes;
  CHECK(m.trainable_param_count() == adapters + head);
  // d_in=64, d_out=192, r=4 -> 1024 for one qkv at the desk default dims
  ModelConfig desk;  // 64-wide desk model
  CHECK(size_t(4) * (desk.embed_dim + 3 * desk.embed_dim) == 1024);
}

TEST_CASE("lora rank bounds are enforced") {
  VitModel m;
  m.init(tiny_config(), 14);
  CHECK_THROWS_AS(attach_lora(m, 0, 8.0f, 1), validation_error);
  VitModel m2;
  m2.init(tiny_config(), 14);
  CHECK_THROWS_AS(attach_lora(m2, 1000, 8.0f, 1), validation_error);
  VitModel m3;
  m3.init(tiny_config(), 14);
  attach_lora(m3, 2, 4.0f, 1);
  CHECK_THROWS_AS(attach_lora(m3, 2, 4.0f, 1), validation_error);
}

TEST_CASE("paper-scale reference: ViT-B/16 LoRA r=16 counts 1.38M (1.57%)") {
  // the full-scale architecture the desk model mirrors: patch 16, embed
  // 768, 12 blocks, 1000 classes, adapters on patch embedding + every qkv
  ModelConfig vitb;
  vitb.image_h = vitb.image_w = 224;
  vitb.channels = 3;
  vitb.vit_patch = 16;
  vitb.embed_dim = 768;
  vitb.num_heads = 12;
  vitb.num_blocks = 12;
  vitb.mlp_ratio = 4;
  vitb.num_classes = 1000;
  const double adapters = double(lora_adapter_param_count(vitb, 16));
  const double head = 768.0 * 1000.0 + 1000.0;
  const double lora_m = (adapters + head) / 1e6;
  CHECK(lora_m == Catch::Approx(1.38).margin(0.005));
  const double full_m = 86.57;
  const double ratio = lora_m / (full_m + lora_m) * 100.0;
  CHECK(ratio == Catch::Approx(1.57).margin(0.01));
}

TEST_CASE("merge_lora with zero up matrices leaves weights unchanged") {
  VitModel m;
  m.init(tiny_config(), 15);
  const auto w_before = m.patch_embed.w.t.v;
  attach_lora(m, 4, 8.0f, 3);
  merge_lora(m);
  CHECK(m.patch_embed.w.t.v == w_before);
  CHECK(m.mode == FinetuneMode::full);
  CHECK_FALSE(m.patch_embed.lora.has_value());
}

TEST_CASE("merged forward equals adapter forward within 1e-5 on 100 inputs") {
  VitModel m;
  m.init(tiny_config(), 16);
  attach_lora(m, 4, 8.0f, 5);
  // give the adapters real content
  SplitMix64 rng(31);
  auto randomize = [&](Linear& l) {
    for (auto& v : l.lora->down.t.v) v = float(rng.normal(0.0, 0.1));
    for (auto& v : l.lora->up.t.v) v = float(rng.normal(0.0, 0.1));
  };
  randomize(m.patch_embed);
  for (auto& blk : m.blocks) randomize(blk.qkv);

  VitModel merged = m;
  merge_lora(merged);
  for (int trial = 0; trial < 100; ++trial) {
    ImageTensor x = random_image(m.cfg, 1000 + uint64_t(trial));
    auto a = forward_plain(x, m);
    auto b = forward_plain(x, merged);
    for (size_t i = 0; i < a.size(); ++i)
      REQUIRE(std::fabs(a[i] - b[i]) < 1e-5f);
  }
}

TEST_CASE("merge_lora on a non-lora or already-merged model errors") {
  VitModel m;
  m.init(tiny_config(), 17);
  CHECK_THROWS_AS(merge_lora(m), validation_error);
  attach_lora(m, 2, 4.0f, 1);
  merge_lora(m);
  CHECK_THROWS_AS(merge_lora(m), validation_error);
}

TEST_CASE("model rejects images with the wrong dimensions") {
  VitModel m;
  m.init(tiny_config(), 18);
  ImageTensor x(3, 16, 16);
  CHECK_THROWS_AS(forward_plain(x, m), validation_error);
}

TEST_CASE("config validation catches bad head/patch combinations") {
  ModelConfig c = tiny_config();
  c.embed_dim = 15;  // not divisible by num_heads=2
  CHECK_THROWS_AS(validate_config(c), validation_error);
  ModelConfig c2 = tiny_config();
  c2.vit_patch = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(validate_config(c2), validation_error);
}
