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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "keyfort/dataset.hpp"
#include "keyfort/model.hpp"
#include "keyfort/parallel.hpp"

namespace keyfort {

enum class TrainMode { pretrain, finetune_full, finetune_lora };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::pretrain: return "pretrain";
    case TrainMode::finetune_full: return "finetune_full";
    default: return "finetune_lora";
  }
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "pretrain") return TrainMode::pretrain;
  if (s == "finetune_full") return TrainMode::finetune_full;
  if (s == "finetune_lora") return TrainMode::finetune_lora;
  throw validation_error("unknown train mode: " + s);
}

// Desk recipe defaults: Adam 3e-4, cosine decay with 10% warmup, batch 128,
// label smoothing 0.1. Augmentation is a horizontal flip applied before the
// keyed transform so the transform stays the last preprocessing step.
struct TrainConfig {
  TrainMode mode = TrainMode::pretrain;
  int epochs = 30;
  int batch_size = 128;
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float warmup_frac = 0.1f;
  float label_smoothing = 0.1f;
  uint64_t seed = 0;
  int lora_rank = 16;
  float lora_alpha = 16.0f;
  bool augment_flip = true;
  size_t train_subset = 0;  // 0 = whole split
  size_t val_subset = 2000;
  int threads = 0;  // 0 = default_threads()
  bool reproducible = true;
  bool verbose = false;
};

inline void validate_train_config(const TrainConfig& c) {
  std::vector<std::string> bad;
  if (c.epochs < 0) bad.push_back("epochs must be >= 0");
  if (c.batch_size < 1) bad.push_back("batch_size must be >= 1");
  if (!(c.lr > 0)) bad.push_back("lr must be > 0");
  if (!(c.label_smoothing >= 0 && c.label_smoothing < 1))
    bad.push_back("label_smoothing must be in [0,1)");
  if (!(c.warmup_frac >= 0 && c.warmup_frac < 1))
    bad.push_back("warmup_frac must be in [0,1)");
  if (c.mode == TrainMode::finetune_lora && c.lora_rank <= 0)
    bad.push_back("lora_rank must be > 0");
  if (!bad.empty()) {
    std::string msg = "train config invalid:";
    for (const auto& b : bad) msg += " [" + b + "]";
    throw validation_error(msg);
  }
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"mode", to_string(c.mode)},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"warmup_frac", c.warmup_frac},
                        {"label_smoothing", c.label_smoothing},
                        {"seed", c.seed},
                        {"lora_rank", c.lora_rank},
                        {"lora_alpha", c.lora_alpha},
                        {"augment_flip", c.augment_flip},
                        {"train_subset", c.train_subset},
                        {"val_subset", c.val_subset},
                        {"threads", c.threads},
                        {"reproducible", c.reproducible}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("mode"))
      c.mode = train_mode_from_string(j.at("mode").get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.seed = j.value("seed", c.seed);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    c.augment_flip = j.value("augment_flip", c.augment_flip);
    c.train_subset = j.value("train_subset", c.train_subset);
    c.val_subset = j.value("val_subset", c.val_subset);
    c.threads = j.value("threads", c.threads);
    c.reproducible = j.value("reproducible", c.reproducible);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("train config: malformed JSON: ") +
                           e.what());
  }
  validate_train_config(c);
  return c;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;
  std::string checkpoint_path;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : epochs)
      rows.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_acc", e.val_acc},
                      {"seconds", e.seconds}});
    return nlohmann::json{{"epochs", rows},
                          {"wall_seconds", wall_seconds},
                          {"checkpoint", checkpoint_path}};
  }

  void append_csv(const std::string& path) const {
    const bool fresh = !std::ifstream(path).good();
    std::ofstream out(path, std::ios::app);
    if (!out) throw validation_error("train report: cannot open " + path);
    if (fresh) out << "epoch,train_loss,train_acc,val_acc,seconds\n";
    char line[160];
    for (const auto& e : epochs) {
      std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.3f\n", e.epoch,
                    e.train_loss, e.train_acc, e.val_acc, e.seconds);
      out << line;
    }
  }
};

// ---- Adam with cosine schedule ----

class Adam {
 public:
  Adam(const std::vector<Param*>& params, const TrainConfig& cfg)
      : params_(params), cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Param* p : params) {
      m_.emplace_back(p->t.shape);
      v_.emplace_back(p->t.shape);
    }
  }

  void step(const GradBuf& grads, float lr) {
    ++t_;
    const float b1 = cfg_.beta1, b2 = cfg_.beta2;
    const float bc1 = 1.0f - std::pow(b1, float(t_));
    const float bc2 = 1.0f - std::pow(b2, float(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param* p = params_[i];
      if (!p->trainable) continue;
      const auto& g = grads.g[i].v;
      auto& m = m_[i].v;
      auto& v = v_[i].v;
      auto& w = p->t.v;
      for (size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (1.0f - b1) * g[k];
        v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
        const float mhat = m[k] / bc1;
        const float vhat = v[k] / bc2;
        w[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  std::vector<Param*> params_;
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

// lr at step t of total: linear warmup then cosine decay to zero.
inline float lr_at(const TrainConfig& cfg, int64_t step, int64_t total) {
  const int64_t warm = int64_t(cfg.warmup_frac * double(total));
  if (step < warm) return cfg.lr * float(step + 1) / float(warm);
  if (total <= warm) return cfg.lr;
  const double p = double(step - warm) / double(total - warm);
  return cfg.lr * 0.5f * float(1.0 + std::cos(3.14159265358979323846 * p));
}

// Validation accuracy of the (possibly keyed) pipeline on plain images.
inline double dataset_accuracy(const Pipeline& pipe, const Dataset& ds,
                               size_t limit, int threads) {
  const size_t n = limit == 0 ? ds.size() : std::min(limit, ds.size());
  if (n == 0) return 0.0;
  const int W = threads > 0 ? threads : default_threads();
  std::vector<size_t> correct(size_t(W), 0);
  std::vector<ModelWorkspace> ws(static_cast<size_t>(W));
  std::vector<ImageTensor> buf(static_cast<size_t>(W));
  parallel_for(n, W, [&](int w, size_t i) {
    ds.image_into(i, buf[size_t(w)]);
    if (pipe.predict(buf[size_t(w)], ws[size_t(w)]) == ds.label(i))
      ++correct[size_t(w)];
  });
  size_t total = 0;
  for (size_t c : correct) total += c;
  return double(total) / double(n);
}

namespace detail {

inline void flip_horizontal(ImageTensor& x) {
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int l = 0, r = x.width - 1; l < r; ++l, --r)
        std::swap(x.at(c, y, l), x.at(c, y, r));
}

}  // namespace detail

// Core loop: one optimizer over the model, workers share read-only
// parameters and accumulate per-worker gradients that are reduced in worker
// order, so a fixed (seed, config) pins the resulting weights bit-exactly.
inline TrainReport train_model(VitModel& m, const Dataset& train_full,
                               const Dataset& val, const Key* key,
                               const TrainConfig& cfg) {
  validate_train_config(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  const Dataset train =
      cfg.train_subset > 0
          ? take_subset(train_full, cfg.train_subset,
                        derive_seed(cfg.seed, 0x5B5E7u /*subset*/))
          : train_full;

  const int W = cfg.threads > 0 ? cfg.threads : default_threads();
  Pipeline pipe(m, key);
  auto params = m.params();
  Adam opt(params, cfg);
  std::vector<GradBuf> grads(static_cast<size_t>(W));
  for (auto& g : grads) g.init(params);
  std::vector<ModelWorkspace> ws(static_cast<size_t>(W));
  std::vector<ImageTensor> buf(static_cast<size_t>(W));

  const size_t n = train.size();
  if (n == 0) throw validation_error("train: empty dataset");
  const int64_t batches_per_epoch = int64_t((n + cfg.batch_size - 1) / cfg.batch_size);
  const int64_t total_steps = batches_per_epoch * cfg.epochs;
  int64_t step = 0;

  TrainReport report;
  std::vector<uint32_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = uint32_t(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    SplitMix64 shuffler(derive_seed(cfg.seed, 0xE0u, uint64_t(epoch)));
    shuffler.shuffle(order);
    std::vector<double> loss_sum(size_t(W), 0.0);
    std::vector<size_t> correct(size_t(W), 0);

    for (size_t begin = 0; begin < n; begin += size_t(cfg.batch_size)) {
      const size_t count = std::min(size_t(cfg.batch_size), n - begin);
      for (auto& g : grads) g.zero();
      parallel_for(count, W, [&](int w, size_t k) {
        const size_t idx = order[begin + k];
        ImageTensor& x = buf[size_t(w)];
        train.image_into(idx, x);
        if (cfg.augment_flip &&
            (derive_seed(cfg.seed, 0xF11Bu + uint64_t(epoch), idx) & 1))
          detail::flip_horizontal(x);
        const float loss = pipe.loss_and_param_grads(
            x, train.label(idx), cfg.label_smoothing, ws[size_t(w)],
            grads[size_t(w)]);
        if (!std::isfinite(loss))
          throw std::runtime_error(
              "train: non-finite loss at epoch " + std::to_string(epoch) +
              ", example " + std::to_string(idx));
        loss_sum[size_t(w)] += double(loss);
        if (argmax(ws[size_t(w)].logits.data(), m.cfg.num_classes) ==
            train.label(idx))
          ++correct[size_t(w)];
      });
      for (int w = 1; w < W; ++w) grads[0].add(grads[size_t(w)]);
      const float inv = 1.0f / float(count);
      for (auto& t : grads[0].g)
        for (auto& gv : t.v) gv *= inv;
      opt.step(grads[0], lr_at(cfg, step, total_steps));
      ++step;
    }

    EpochStats es;
    es.epoch = epoch;
    double lsum = 0.0;
    size_t csum = 0;
    for (int w = 0; w < W; ++w) {
      lsum += loss_sum[size_t(w)];
      csum += correct[size_t(w)];
    }
    es.train_loss = lsum / double(n);
    es.train_acc = double(csum) / double(n);
    es.val_acc = dataset_accuracy(pipe, val, cfg.val_subset, W);
    es.seconds =
        cfg.reproducible
            ? 0.0
            : std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            t_epoch)
                  .count();
    if (cfg.verbose)
      std::fprintf(stderr,
                   "epoch %3d  loss %.4f  train acc %.4f  val acc %.4f\n",
                   epoch, es.train_loss, es.train_acc, es.val_acc);
    report.epochs.push_back(es);
  }
  report.wall_seconds =
      cfg.reproducible
          ? 0.0
          : std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          t_start)
                .count();
  return report;
}

// Plain pre-training: produces the public model the defense starts from.
inline VitModel pretrain(const ModelConfig& mc, const DatasetPair& data,
                         const TrainConfig& cfg, TrainReport* report = nullptr) {
  if (cfg.mode != TrainMode::pretrain)
    throw validation_error("pretrain: config mode must be 'pretrain'");
  VitModel m;
  m.init(mc, cfg.seed);
  const DataStats stats = compute_stats(data.train);
  m.set_normalization(stats.mean, stats.stddev);
  TrainReport rep = train_model(m, data.train, data.test, nullptr, cfg);
  if (report) *report = rep;
  return m;
}

// Keyed fine-tuning of a pre-trained model; full mode updates everything,
// lora mode attaches adapters and updates only adapters + head.
inline VitModel finetune(const VitModel& m0, const Key& key,
                         const DatasetPair& data, const TrainConfig& cfg,
                         TrainReport* report = nullptr) {
  if (cfg.mode != TrainMode::finetune_full &&
      cfg.mode != TrainMode::finetune_lora)
    throw validation_error("finetune: config mode must be finetune_full or finetune_lora");
  if (key.channels != m0.cfg.channels ||
      m0.cfg.image_h % key.block_size != 0 ||
      m0.cfg.image_w % key.block_size != 0)
    throw validation_error("finetune: key incompatible with model input dims");
  VitModel m = m0;
  if (cfg.mode == TrainMode::finetune_lora) {
    if (m.mode != FinetuneMode::lora)
      attach_lora(m, cfg.lora_rank, cfg.lora_alpha,
                  derive_seed(cfg.seed, 0x10124u));
  } else {
    m.mode = FinetuneMode::full;
    m.set_all_trainable(true);
    m.assign_param_ids();
  }
  m.key = key;
  TrainReport rep = train_model(m, data.train, data.test, &key, cfg);
  if (report) *report = rep;
  return m;
}

// Fine-tunes one defended model per seed, all from the same pre-trained
// state.
inline std::vector<std::pair<Key, VitModel>> proliferate(
    const VitModel& m0, const std::vector<uint64_t>& seeds, int block_size,
    const DatasetPair& data, const TrainConfig& cfg,
    std::vector<TrainReport>* reports = nullptr) {
  std::set<uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size())
    throw validation_error("proliferate: duplicate key seeds");
  if (seeds.empty()) throw validation_error("proliferate: no seeds given");
  std::vector<std::pair<Key, VitModel>> out;
  for (uint64_t s : seeds) {
    Key key = generate_key(s, block_size, m0.cfg.channels);
    TrainReport rep;
    out.emplace_back(key, finetune(m0, key, data, cfg, &rep));
    if (reports) reports->push_back(std::move(rep));
  }
  return out;
}

}  // namespace keyfort
