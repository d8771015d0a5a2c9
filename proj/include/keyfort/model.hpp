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

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/image.hpp"
#include "keyfort/layers.hpp"
#include "keyfort/transform.hpp"

namespace keyfort {

// Desk-scale ViT. The shuffle block size P lives in the Key and is
// independent of vit_patch here.
struct ModelConfig {
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int vit_patch = 4;
  int embed_dim = 64;
  int num_heads = 4;
  int num_blocks = 4;
  int mlp_ratio = 4;
  int num_classes = 10;

  int tokens() const {
    return (image_h / vit_patch) * (image_w / vit_patch);
  }
  int patch_dim() const { return channels * vit_patch * vit_patch; }
  int mlp_dim() const { return mlp_ratio * embed_dim; }
};

inline void validate_config(const ModelConfig& c) {
  if (c.image_h < 1 || c.image_w < 1 || c.channels < 1)
    throw validation_error("model config: bad image dims");
  if (c.vit_patch < 1 || c.image_h % c.vit_patch != 0 ||
      c.image_w % c.vit_patch != 0)
    throw validation_error("model config: image dims not divisible by vit_patch");
  if (c.embed_dim < 1 || c.num_heads < 1 || c.embed_dim % c.num_heads != 0)
    throw validation_error("model config: embed_dim must be divisible by num_heads");
  if (c.num_blocks < 1 || c.mlp_ratio < 1 || c.num_classes < 2)
    throw validation_error("model config: bad depth/width/class count");
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"image_h", c.image_h},     {"image_w", c.image_w},
                        {"channels", c.channels},   {"vit_patch", c.vit_patch},
                        {"embed_dim", c.embed_dim}, {"num_heads", c.num_heads},
                        {"num_blocks", c.num_blocks},
                        {"mlp_ratio", c.mlp_ratio},
                        {"num_classes", c.num_classes},
                        {"pooling", "mean"}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.channels = j.at("channels").get<int>();
    c.vit_patch = j.at("vit_patch").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("model config: malformed JSON: ") +
                           e.what());
  }
  validate_config(c);
  return c;
}

enum class FinetuneMode { plain, full, lora };

inline std::string to_string(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::plain: return "plain";
    case FinetuneMode::full: return "full";
    default: return "lora";
  }
}

inline FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "plain") return FinetuneMode::plain;
  if (s == "full") return FinetuneMode::full;
  if (s == "lora") return FinetuneMode::lora;
  throw validation_error("unknown fine-tune mode: " + s);
}

struct TransformerBlock {
  LayerNorm ln1;
  Linear qkv;
  Linear proj;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
};

// Classifier state: all parameters of f, the fine-tune mode, the attached
// key (for defended models) and the per-channel standardization statistics
// that f applies after the keyed transform.
struct VitModel {
  ModelConfig cfg;
  FinetuneMode mode = FinetuneMode::plain;
  bool lora_merged = false;

  Linear patch_embed;  // patch_dim -> embed_dim
  Param pos_embed;     // [tokens, embed_dim]
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear head;

  std::optional<Key> key;
  std::vector<float> norm_mean, norm_std;

  void init(const ModelConfig& config, uint64_t seed) {
    validate_config(config);
    cfg = config;
    SplitMix64 rng(seed);
    patch_embed.init("patch_embed", cfg.patch_dim(), cfg.embed_dim, rng);
    pos_embed.name = "pos_embed";
    pos_embed.t = Tensor::randn({cfg.tokens(), cfg.embed_dim}, rng, 0.02f);
    blocks.assign(size_t(cfg.num_blocks), {});
    for (int i = 0; i < cfg.num_blocks; ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto& blk = blocks[size_t(i)];
      blk.ln1.init(p + "ln1", cfg.embed_dim);
      blk.qkv.init(p + "qkv", cfg.embed_dim, 3 * cfg.embed_dim, rng);
      blk.proj.init(p + "proj", cfg.embed_dim, cfg.embed_dim, rng);
      blk.ln2.init(p + "ln2", cfg.embed_dim);
      blk.fc1.init(p + "fc1", cfg.embed_dim, cfg.mlp_dim(), rng);
      blk.fc2.init(p + "fc2", cfg.mlp_dim(), cfg.embed_dim, rng);
    }
    final_ln.init("final_ln", cfg.embed_dim);
    head.init("head", cfg.embed_dim, cfg.num_classes, rng);
    norm_mean.assign(size_t(cfg.channels), 0.0f);
    norm_std.assign(size_t(cfg.channels), 1.0f);
    assign_param_ids();
  }

  void set_normalization(const std::vector<float>& mean,
                         const std::vector<float>& stddev) {
    if (int(mean.size()) != cfg.channels || int(stddev.size()) != cfg.channels)
      throw validation_error("normalization stats must have one entry per channel");
    norm_mean = mean;
    norm_std = stddev;
  }

  // Canonical parameter order; ids follow this order.
  std::vector<Param*> params() {
    std::vector<Param*> out;
    auto push_linear = [&](Linear& l) {
      out.push_back(&l.w);
      out.push_back(&l.b);
      if (l.lora) {
        out.push_back(&l.lora->down);
        out.push_back(&l.lora->up);
      }
    };
    push_linear(patch_embed);
    out.push_back(&pos_embed);
    for (auto& blk : blocks) {
      out.push_back(&blk.ln1.gamma);
      out.push_back(&blk.ln1.beta);
      push_linear(blk.qkv);
      push_linear(blk.proj);
      out.push_back(&blk.ln2.gamma);
      out.push_back(&blk.ln2.beta);
      push_linear(blk.fc1);
      push_linear(blk.fc2);
    }
    out.push_back(&final_ln.gamma);
    out.push_back(&final_ln.beta);
    push_linear(head);
    return out;
  }

  std::vector<const Param*> params() const {
    auto mut = const_cast<VitModel*>(this)->params();
    return {mut.begin(), mut.end()};
  }

  void assign_param_ids() {
    auto ps = params();
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->id = int(i);
  }

  size_t param_count() const {
    size_t n = 0;
    for (const Param* p : params()) n += p->t.numel();
    return n;
  }

  size_t trainable_param_count() const {
    size_t n = 0;
    for (const Param* p : params())
      if (p->trainable) n += p->t.numel();
    return n;
  }

  void set_all_trainable(bool on) {
    for (Param* p : params()) p->trainable = on;
  }
};

// ---- LoRA attach / merge ----

// Adapters on the patch embedding and every block's fused qkv projection;
// everything else frozen except the classifier head.
inline void attach_lora(VitModel& m, int rank, float alpha, uint64_t seed) {
  if (m.mode == FinetuneMode::lora)
    throw validation_error("attach_lora: adapters already attached");
  auto attach_one = [&](Linear& l, SplitMix64& rng) {
    if (rank <= 0 || rank > std::min(l.in, l.out))
      throw validation_error("attach_lora: rank " + std::to_string(rank) +
                             " out of range for " + std::to_string(l.in) +
                             "x" + std::to_string(l.out) + " layer");
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    a.down.name = l.w.name.substr(0, l.w.name.size() - 2) + ".lora_down";
    a.down.t = Tensor::randn({rank, l.in}, rng, 0.02f);
    a.up.name = l.w.name.substr(0, l.w.name.size() - 2) + ".lora_up";
    a.up.t = Tensor::zeros({l.out, rank});
    l.lora = std::move(a);
  };
  SplitMix64 rng(seed);
  attach_one(m.patch_embed, rng);
  for (auto& blk : m.blocks) attach_one(blk.qkv, rng);
  // freeze the base; adapters and head stay trainable
  m.set_all_trainable(false);
  m.patch_embed.lora->down.trainable = true;
  m.patch_embed.lora->up.trainable = true;
  for (auto& blk : m.blocks) {
    blk.qkv.lora->down.trainable = true;
    blk.qkv.lora->up.trainable = true;
  }
  m.head.w.trainable = true;
  m.head.b.trainable = true;
  m.mode = FinetuneMode::lora;
  m.lora_merged = false;
  m.assign_param_ids();
}

// Folds each adapter into its base weight (W += (alpha/r) * up * down) and
// removes it; the merged model computes the same function with zero adapter
// overhead.
inline void merge_lora(VitModel& m) {
  if (m.mode != FinetuneMode::lora)
    throw validation_error(m.lora_merged
                               ? "merge_lora: adapters already merged"
                               : "merge_lora: model has no adapters");
  auto merge_one = [](Linear& l) {
    if (!l.lora) return;
    const auto& a = *l.lora;
    matmul_nn(a.up.t.data(), a.down.t.data(), l.w.t.data(), l.out, a.rank,
              l.in, 1.0f);  // accumulates; up is pre-scaled below
    l.lora.reset();
  };
  // pre-scale up by alpha/r so the accumulate above lands W += s*up*down
  auto scale_up = [](Linear& l) {
    if (!l.lora) return;
    const float s = l.lora->scale();
    for (auto& v : l.lora->up.t.v) v *= s;
  };
  scale_up(m.patch_embed);
  merge_one(m.patch_embed);
  for (auto& blk : m.blocks) {
    scale_up(blk.qkv);
    merge_one(blk.qkv);
  }
  m.mode = FinetuneMode::full;
  m.lora_merged = true;
  m.set_all_trainable(true);
  m.assign_param_ids();
}

// Closed-form adapter count: sum of r*(d_in+d_out) over adapted layers.
inline size_t lora_adapter_param_count(const ModelConfig& cfg, int rank) {
  size_t n = size_t(rank) * (size_t(cfg.patch_dim()) + cfg.embed_dim);
  n += size_t(cfg.num_blocks) * size_t(rank) *
       (size_t(cfg.embed_dim) + 3 * size_t(cfg.embed_dim));
  return n;
}

// ---- Forward / backward ----

struct BlockScratch {
  LayerNormCache ln1c;
  Tensor ln1_out;
  AttentionCache attn;
  Tensor attn_out;
  Tensor res1;
  LayerNormCache ln2c;
  Tensor ln2_out;
  Tensor fc1_out;
  Tensor gelu_out;
  Tensor mlp_out;
  Tensor res2;
};

struct ModelWorkspace {
  Tensor patches;  // [T, patch_dim]
  Tensor tokens;   // [T, E]
  std::vector<BlockScratch> blocks;
  LayerNormCache final_lnc;
  Tensor final_ln_out;
  Tensor pooled;
  Tensor logits;
  // backward
  Tensor g_tokens, g_alt, g_wide, g_pooled, g_logits, g_patches, g_qkv,
      scratch;
  // keyed-pipeline staging buffers
  Tensor input_buf, g_input_buf;

  void ensure(const ModelConfig& c) {
    const int T = c.tokens(), E = c.embed_dim, M = c.mlp_dim();
    if (patches.shape == std::vector<int>{T, c.patch_dim()} &&
        int(blocks.size()) == c.num_blocks)
      return;
    patches = Tensor({T, c.patch_dim()});
    tokens = Tensor({T, E});
    blocks.assign(size_t(c.num_blocks), {});
    for (auto& b : blocks) {
      b.ln1_out = Tensor({T, E});
      b.attn_out = Tensor({T, E});
      b.res1 = Tensor({T, E});
      b.ln2_out = Tensor({T, E});
      b.fc1_out = Tensor({T, M});
      b.gelu_out = Tensor({T, M});
      b.mlp_out = Tensor({T, E});
      b.res2 = Tensor({T, E});
    }
    final_ln_out = Tensor({T, E});
    pooled = Tensor({E});
    logits = Tensor({c.num_classes});
    g_tokens = Tensor({T, E});
    g_alt = Tensor({T, E});
    g_wide = Tensor({T, M});
    g_pooled = Tensor({E});
    g_logits = Tensor({c.num_classes});
    g_patches = Tensor({T, c.patch_dim()});
    g_qkv = Tensor({T, 3 * E});
    scratch = Tensor({T * T});
    input_buf = Tensor({c.channels, c.image_h, c.image_w});
    g_input_buf = Tensor({c.channels, c.image_h, c.image_w});
  }
};

namespace detail {

// Standardize and cut into per-token patch rows. Token t = (ty, tx) scans
// row-major over the patch grid; within a token the layout is channel-major
// (c*p*p + py*p + px), matching the keyed transform's flattening.
inline void patchify(const VitModel& m, const float* img, float* patches) {
  const auto& c = m.cfg;
  const int p = c.vit_patch, gw = c.image_w / p;
  for (int ch = 0; ch < c.channels; ++ch) {
    const float inv = 1.0f / m.norm_std[size_t(ch)];
    const float mean = m.norm_mean[size_t(ch)];
    const float* plane = img + size_t(ch) * c.image_h * c.image_w;
    for (int y = 0; y < c.image_h; ++y) {
      const int ty = y / p, py = y % p;
      for (int x = 0; x < c.image_w; ++x) {
        const int t = ty * gw + x / p;
        const int k = (ch * p + py) * p + x % p;
        patches[size_t(t) * c.patch_dim() + k] =
            (plane[size_t(y) * c.image_w + x] - mean) * inv;
      }
    }
  }
}

inline void unpatchify_grad(const VitModel& m, const float* g_patches,
                            float* g_img) {
  const auto& c = m.cfg;
  const int p = c.vit_patch, gw = c.image_w / p;
  for (int ch = 0; ch < c.channels; ++ch) {
    const float inv = 1.0f / m.norm_std[size_t(ch)];
    float* plane = g_img + size_t(ch) * c.image_h * c.image_w;
    for (int y = 0; y < c.image_h; ++y) {
      const int ty = y / p, py = y % p;
      for (int x = 0; x < c.image_w; ++x) {
        const int t = ty * gw + x / p;
        const int k = (ch * p + py) * p + x % p;
        plane[size_t(y) * c.image_w + x] =
            g_patches[size_t(t) * c.patch_dim() + k] * inv;
      }
    }
  }
}

}  // namespace detail

// Forward pass of f on already-transformed pixels; logits land in
// ws.logits. All caches needed by model_backward stay in ws.
inline const float* model_forward(const VitModel& m, const float* img,
                                  ModelWorkspace& ws) {
  const auto& c = m.cfg;
  ws.ensure(c);
  const int T = c.tokens(), E = c.embed_dim;
  detail::patchify(m, img, ws.patches.data());
  linear_forward(m.patch_embed, ws.patches.data(), T, ws.tokens.data());
  for (size_t i = 0; i < ws.tokens.v.size(); ++i)
    ws.tokens.v[i] += m.pos_embed.t.v[i];
  const float* cur = ws.tokens.data();
  for (int bi = 0; bi < c.num_blocks; ++bi) {
    auto& blk = m.blocks[size_t(bi)];
    auto& s = ws.blocks[size_t(bi)];
    layernorm_forward(blk.ln1, cur, T, s.ln1c, s.ln1_out.data());
    s.attn.qkv = Tensor({T, 3 * E});
    linear_forward(blk.qkv, s.ln1_out.data(), T, s.attn.qkv.data());
    attention_core_forward(s.attn.qkv.data(), T, E, c.num_heads, s.attn);
    linear_forward(blk.proj, s.attn.ctx.data(), T, s.attn_out.data());
    for (size_t i = 0; i < s.res1.v.size(); ++i)
      s.res1.v[i] = cur[i] + s.attn_out.v[i];
    layernorm_forward(blk.ln2, s.res1.data(), T, s.ln2c, s.ln2_out.data());
    linear_forward(blk.fc1, s.ln2_out.data(), T, s.fc1_out.data());
    gelu_forward(s.fc1_out.data(), s.fc1_out.numel(), s.gelu_out.data());
    linear_forward(blk.fc2, s.gelu_out.data(), T, s.mlp_out.data());
    for (size_t i = 0; i < s.res2.v.size(); ++i)
      s.res2.v[i] = s.res1.v[i] + s.mlp_out.v[i];
    cur = s.res2.data();
  }
  layernorm_forward(m.final_ln, cur, T, ws.final_lnc, ws.final_ln_out.data());
  mean_pool_forward(ws.final_ln_out.data(), T, E, ws.pooled.data());
  linear_forward(m.head, ws.pooled.data(), 1, ws.logits.data());
  return ws.logits.data();
}

// Backward from a logit gradient. param_grads may be null (input gradient
// only), g_input may be null (training without input gradient). g_input, if
// given, is the gradient in standardized-pixel space already mapped back to
// image layout.
inline void model_backward(const VitModel& m, ModelWorkspace& ws,
                           const float* g_logits, GradBuf* param_grads,
                           float* g_img) {
  const auto& c = m.cfg;
  const int T = c.tokens(), E = c.embed_dim;

  linear_backward(m.head, ws.pooled.data(), 1, g_logits, ws.g_pooled.data(),
                  param_grads);
  mean_pool_backward(ws.g_pooled.data(), T, E, ws.g_alt.data());
  layernorm_backward(m.final_ln, ws.final_lnc, T, ws.g_alt.data(),
                     ws.g_tokens.data(), param_grads);

  for (int bi = c.num_blocks - 1; bi >= 0; --bi) {
    auto& blk = m.blocks[size_t(bi)];
    auto& s = ws.blocks[size_t(bi)];
    // g_tokens holds d res2; mlp branch first
    linear_backward(blk.fc2, s.gelu_out.data(), T, ws.g_tokens.data(),
                    ws.g_wide.data(), param_grads);
    gelu_backward(s.fc1_out.data(), ws.g_wide.data(), ws.g_wide.numel(),
                  ws.g_wide.data());
    linear_backward(blk.fc1, s.ln2_out.data(), T, ws.g_wide.data(),
                    ws.g_alt.data(), param_grads);
    // d res1 = d res2 + LN2-backprop(d mlp_in); LN backward is in-place safe
    layernorm_backward(blk.ln2, s.ln2c, T, ws.g_alt.data(), ws.g_alt.data(),
                       param_grads);
    for (size_t i = 0; i < ws.g_tokens.v.size(); ++i)
      ws.g_tokens.v[i] += ws.g_alt.v[i];
    // attention branch
    linear_backward(blk.proj, s.attn.ctx.data(), T, ws.g_tokens.data(),
                    ws.g_alt.data(), param_grads);
    attention_core_backward(s.attn.qkv.data(), s.attn, T, E, c.num_heads,
                            ws.g_alt.data(), ws.g_qkv.data(),
                            ws.scratch.data());
    linear_backward(blk.qkv, s.ln1_out.data(), T, ws.g_qkv.data(),
                    ws.g_alt.data(), param_grads);
    layernorm_backward(blk.ln1, s.ln1c, T, ws.g_alt.data(), ws.g_alt.data(),
                       param_grads);
    for (size_t i = 0; i < ws.g_tokens.v.size(); ++i)
      ws.g_tokens.v[i] += ws.g_alt.v[i];
  }

  if (param_grads && m.pos_embed.trainable) {
    // pos_embed gradient is d tokens directly
    Tensor& gp = param_grads->of(m.pos_embed);
    for (size_t i = 0; i < gp.v.size(); ++i) gp.v[i] += ws.g_tokens.v[i];
  }
  if (g_img || param_grads) {
    linear_backward(m.patch_embed, ws.patches.data(), T, ws.g_tokens.data(),
                    g_img ? ws.g_patches.data() : nullptr, param_grads);
    if (g_img) detail::unpatchify_grad(m, ws.g_patches.data(), g_img);
  }
}

// f(x): plain forward on untransformed pixels.
inline std::vector<float> forward_plain(const ImageTensor& x,
                                        const VitModel& m) {
  if (x.channels != m.cfg.channels || x.height != m.cfg.image_h ||
      x.width != m.cfg.image_w)
    throw validation_error("forward: image dims do not match model config");
  ModelWorkspace ws;
  const float* lg = model_forward(m, x.data.data(), ws);
  return {lg, lg + m.cfg.num_classes};
}

// M_K(x) = f(t(x, K)).
inline std::vector<float> forward_defended(const ImageTensor& x,
                                           const VitModel& m, const Key& key) {
  ImageTensor tx = transform(x, key);
  return forward_plain(tx, m);
}

// Crafting/eval surface: a model plus (optionally) its keyed input
// transform, with gradients flowing through both.
class Pipeline {
 public:
  Pipeline(const VitModel& model, const Key* key) : model_(&model) {
    if (key) {
      validate_key(*key);
      if (key->channels != model.cfg.channels)
        throw validation_error("pipeline: key/model channel mismatch");
      map_ = PermutationMap(*key, model.cfg.image_h, model.cfg.image_w);
      keyed_ = true;
    }
  }

  const VitModel& model() const { return *model_; }
  bool keyed() const { return keyed_; }

  const float* logits(const ImageTensor& x, ModelWorkspace& ws) const {
    check_dims(x);
    if (!keyed_) return model_forward(*model_, x.data.data(), ws);
    ws.ensure(model_->cfg);
    map_.apply(x.data.data(), ws.input_buf.data());
    return model_forward(*model_, ws.input_buf.data(), ws);
  }

  int predict(const ImageTensor& x, ModelWorkspace& ws) const {
    return argmax(logits(x, ws), model_->cfg.num_classes);
  }

  // Cross-entropy loss and its gradient w.r.t. the *plain* input pixels.
  float loss_and_input_grad(const ImageTensor& x, int label,
                            ModelWorkspace& ws, ImageTensor& g_x,
                            float smoothing = 0.0f) const {
    const float* lg = logits(x, ws);
    const float loss = cross_entropy(lg, model_->cfg.num_classes, label,
                                     smoothing, ws.g_logits.data());
    g_x = ImageTensor(x.channels, x.height, x.width);
    if (!keyed_) {
      model_backward(*model_, ws, ws.g_logits.data(), nullptr,
                     g_x.data.data());
    } else {
      model_backward(*model_, ws, ws.g_logits.data(), nullptr,
                     ws.g_input_buf.data());
      map_.apply_inverse(ws.g_input_buf.data(), g_x.data.data());
    }
    return loss;
  }

  // Loss plus parameter gradients on transformed input (training path).
  float loss_and_param_grads(const ImageTensor& x, int label, float smoothing,
                             ModelWorkspace& ws, GradBuf& grads) const {
    const float* lg = logits(x, ws);
    const float loss = cross_entropy(lg, model_->cfg.num_classes, label,
                                     smoothing, ws.g_logits.data());
    model_backward(*model_, ws, ws.g_logits.data(), &grads, nullptr);
    return loss;
  }

 private:
  void check_dims(const ImageTensor& x) const {
    if (x.channels != model_->cfg.channels || x.height != model_->cfg.image_h ||
        x.width != model_->cfg.image_w)
      throw validation_error("pipeline: image dims do not match model config");
  }

  const VitModel* model_;
  PermutationMap map_;
  bool keyed_ = false;
};

}  // namespace keyfort
