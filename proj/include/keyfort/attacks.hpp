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
#include <limits>
#include <string>
#include <vector>

#include "keyfort/dataset.hpp"
#include "keyfort/model.hpp"
#include "keyfort/parallel.hpp"
#include "keyfort/report.hpp"
#include "keyfort/trainer.hpp"

namespace keyfort {

enum class Norm { linf, l2 };

inline std::string to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

inline Norm norm_from_string(const std::string& s) {
  if (s == "linf" || s == "inf") return Norm::linf;
  if (s == "l2" || s == "2") return Norm::l2;
  throw validation_error("unknown norm: " + s + " (want linf or l2)");
}

struct AttackConfig {
  Norm norm = Norm::linf;
  float epsilon = 4.0f / 255.0f;
  int steps = 10;
  float step_size = 0.0f;  // 0 -> epsilon / 4
  bool random_start = true;
  bool targeted = false;
  int target_label = -1;
  uint64_t seed = 0;
  int threads = 0;

  float effective_step() const {
    return step_size > 0.0f ? step_size : epsilon / 4.0f;
  }
};

inline void validate_attack_config(const AttackConfig& c) {
  if (!(c.epsilon >= 0.0f))
    throw validation_error("attack: epsilon must be >= 0");
  if (c.steps < 1) throw validation_error("attack: steps must be >= 1");
  if (c.targeted && c.target_label < 0)
    throw validation_error("attack: targeted mode needs a target label");
}

inline nlohmann::json attack_config_to_json(const AttackConfig& c) {
  return nlohmann::json{{"norm", to_string(c.norm)},
                        {"epsilon", c.epsilon},
                        {"steps", c.steps},
                        {"step_size", c.step_size},
                        {"random_start", c.random_start},
                        {"targeted", c.targeted},
                        {"target_label", c.target_label},
                        {"seed", c.seed},
                        {"threads", c.threads}};
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  try {
    if (j.contains("norm"))
      c.norm = norm_from_string(j.at("norm").get<std::string>());
    c.epsilon = j.value("epsilon", c.epsilon);
    c.steps = j.value("steps", c.steps);
    c.step_size = j.value("step_size", c.step_size);
    c.random_start = j.value("random_start", c.random_start);
    c.targeted = j.value("targeted", c.targeted);
    c.target_label = j.value("target_label", c.target_label);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("attack config: malformed JSON: ") +
                           e.what());
  }
  validate_attack_config(c);
  return c;
}

// Crafted perturbations plus per-example bookkeeping against the crafting
// model.
struct AdversarialBatch {
  std::vector<ImageTensor> originals;
  std::vector<ImageTensor> deltas;
  std::vector<int> labels;
  std::vector<uint8_t> success;  // fooled the crafting model

  size_t size() const { return labels.size(); }

  // x + delta clamped into the pixel box.
  ImageTensor adversarial(size_t i) const {
    ImageTensor out = originals[i];
    for (size_t k = 0; k < out.data.size(); ++k) {
      const float v = out.data[k] + deltas[i].data[k];
      out.data[k] = std::min(1.0f, std::max(0.0f, v));
    }
    return out;
  }
};

namespace detail {

inline float linf_norm(const std::vector<float>& v) {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::fabs(x));
  return m;
}

inline double l2_norm(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

// delta <- clamp(x + delta, 0, 1) - x, coordinate-wise; only ever shrinks
// magnitudes, so it cannot break a norm constraint already satisfied.
inline void project_box(const ImageTensor& x, std::vector<float>& delta) {
  for (size_t k = 0; k < delta.size(); ++k) {
    const float lo = -x.data[k];
    const float hi = 1.0f - x.data[k];
    delta[k] = std::min(hi, std::max(lo, delta[k]));
  }
}

inline void project_norm(Norm norm, float eps, std::vector<float>& delta) {
  if (norm == Norm::linf) {
    for (auto& d : delta) d = std::min(eps, std::max(-eps, d));
  } else {
    const double n = l2_norm(delta);
    if (n > double(eps) && n > 0.0) {
      const float s = float(double(eps) / n);
      for (auto& d : delta) d *= s;
    }
  }
}

}  // namespace detail

// Iterative projected ascent on the crafting pipeline's loss. Untargeted
// mode maximizes the true-class loss; targeted mode minimizes the
// target-class loss. Each step projects onto the epsilon-ball and the
// [0,1] pixel box; the best-loss iterate is returned.
inline AdversarialBatch pgd(const Pipeline& pipe, const Dataset& ds,
                            const std::vector<size_t>& indices,
                            const AttackConfig& cfg) {
  validate_attack_config(cfg);
  const int W = cfg.threads > 0 ? cfg.threads : default_threads();
  AdversarialBatch batch;
  batch.originals.resize(indices.size());
  batch.deltas.resize(indices.size());
  batch.labels.resize(indices.size());
  batch.success.assign(indices.size(), 0);

  std::vector<ModelWorkspace> ws(static_cast<size_t>(W));
  parallel_for(indices.size(), W, [&](int w, size_t i) {
    ModelWorkspace& wks = ws[size_t(w)];
    ImageTensor x;
    ds.image_into(indices[i], x);
    const int y = ds.label(indices[i]);
    const int loss_label = cfg.targeted ? cfg.target_label : y;
    const float sign = cfg.targeted ? -1.0f : 1.0f;

    ImageTensor adv = x;
    std::vector<float> delta(x.data.size(), 0.0f);

    if (cfg.epsilon > 0.0f) {
      const size_t d = x.data.size();
      if (cfg.random_start) {
        SplitMix64 rng(derive_seed(cfg.seed, 0xADE5u, indices[i]));
        if (cfg.norm == Norm::linf) {
          for (auto& v : delta)
            v = float(rng.uniform(-double(cfg.epsilon), double(cfg.epsilon)));
        } else {
          for (auto& v : delta) v = float(rng.normal());
          const double n = detail::l2_norm(delta);
          const double r =
              double(cfg.epsilon) * std::pow(rng.uniform(), 1.0 / double(d));
          if (n > 0.0)
            for (auto& v : delta) v = float(double(v) * r / n);
        }
        detail::project_box(x, delta);
      }

      const float eta = cfg.effective_step();
      float best_loss = -std::numeric_limits<float>::infinity();
      std::vector<float> best_delta = delta;
      ImageTensor grad;
      for (int step = 0; step < cfg.steps; ++step) {
        for (size_t k = 0; k < delta.size(); ++k)
          adv.data[k] = x.data[k] + delta[k];
        const float loss =
            sign * pipe.loss_and_input_grad(adv, loss_label, wks, grad);
        if (!std::isfinite(loss))
          throw std::runtime_error("pgd: non-finite loss at step " +
                                   std::to_string(step));
        if (loss > best_loss) {
          best_loss = loss;
          best_delta = delta;
        }
        if (cfg.norm == Norm::linf) {
          for (size_t k = 0; k < delta.size(); ++k)
            delta[k] += eta * sign * (grad.data[k] > 0.0f   ? 1.0f
                                      : grad.data[k] < 0.0f ? -1.0f
                                                            : 0.0f);
        } else {
          const double gn = detail::l2_norm(grad.data);
          if (gn > 1e-12) {
            const float s = float(double(eta) * double(sign) / gn);
            for (size_t k = 0; k < delta.size(); ++k)
              delta[k] += s * grad.data[k];
          }
        }
        detail::project_norm(cfg.norm, cfg.epsilon, delta);
        detail::project_box(x, delta);
      }
      // final iterate competes on loss too
      {
        for (size_t k = 0; k < delta.size(); ++k)
          adv.data[k] = x.data[k] + delta[k];
        float final_loss =
            sign * cross_entropy(pipe.logits(adv, wks),
                                 pipe.model().cfg.num_classes, loss_label,
                                 0.0f, nullptr);
        if (final_loss > best_loss) best_delta = delta;
      }
      delta = best_delta;
    }

    for (size_t k = 0; k < delta.size(); ++k)
      adv.data[k] = x.data[k] + delta[k];
    const int pred = pipe.predict(adv, wks);
    batch.originals[i] = std::move(x);
    batch.deltas[i] = ImageTensor(adv.channels, adv.height, adv.width);
    batch.deltas[i].data = std::move(delta);
    batch.labels[i] = y;
    batch.success[i] =
        cfg.targeted ? uint8_t(pred == cfg.target_label) : uint8_t(pred != y);
  });
  return batch;
}

// One-step sign attack: delta = epsilon * sign(grad), the single-step
// l-inf special case of pgd with no random start.
inline AdversarialBatch fgsm(const Pipeline& pipe, const Dataset& ds,
                             const std::vector<size_t>& indices,
                             AttackConfig cfg) {
  if (cfg.steps != 1)
    throw validation_error("fgsm: steps must be 1");
  if (cfg.norm != Norm::linf)
    throw validation_error("fgsm: only the l-inf norm is defined");
  cfg.random_start = false;
  cfg.step_size = cfg.epsilon;
  return pgd(pipe, ds, indices, cfg);
}

// Budget/box feasibility of every example; tolerance covers float rounding
// in the radial l2 projection.
inline void check_feasible(const AdversarialBatch& batch, Norm norm,
                           float eps, float tol = 1e-6f) {
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& d = batch.deltas[i].data;
    const double n = norm == Norm::linf ? double(detail::linf_norm(d))
                                        : detail::l2_norm(d);
    if (n > double(eps) + double(tol))
      throw std::runtime_error("adversarial batch: norm " + std::to_string(n) +
                               " exceeds budget " + std::to_string(eps) +
                               " at example " + std::to_string(i));
    const auto& x = batch.originals[i].data;
    for (size_t k = 0; k < d.size(); ++k) {
      const float v = x[k] + d[k];
      if (v < -tol || v > 1.0f + tol)
        throw std::runtime_error(
            "adversarial batch: pixel outside [0,1] at example " +
            std::to_string(i));
    }
  }
}

// Accuracy of a (target) pipeline on the attacked images, Eq.-4 style.
inline double accuracy_on_batch(const Pipeline& target,
                                const AdversarialBatch& batch, int threads) {
  if (batch.size() == 0) throw validation_error("empty adversarial batch");
  const int W = threads > 0 ? threads : default_threads();
  std::vector<size_t> correct(size_t(W), 0);
  std::vector<ModelWorkspace> ws(static_cast<size_t>(W));
  parallel_for(batch.size(), W, [&](int w, size_t i) {
    const ImageTensor adv = batch.adversarial(i);
    if (target.predict(adv, ws[size_t(w)]) == batch.labels[i])
      ++correct[size_t(w)];
  });
  size_t total = 0;
  for (size_t c : correct) total += c;
  return double(total) / double(batch.size());
}

inline std::vector<size_t> first_n_indices(const Dataset& ds, size_t n) {
  const size_t m = n == 0 ? ds.size() : std::min(n, ds.size());
  std::vector<size_t> idx(m);
  for (size_t i = 0; i < m; ++i) idx[i] = i;
  return idx;
}

// ---- Threat scenarios ----

namespace detail {

inline EvalRow describe(const VitModel& m, const std::string& model_id,
                        const std::string& scenario, const AttackConfig& cfg,
                        size_t n, double acc) {
  EvalRow row;
  row.model_id = model_id;
  row.defense = m.key ? "key" : "plain";
  row.block_size = m.key ? m.key->block_size : 0;
  row.finetune = m.key ? to_string(m.mode) : "no";
  row.scenario = scenario;
  row.norm = scenario == "clean" ? "none" : to_string(cfg.norm);
  row.epsilon = scenario == "clean" ? 0.0 : cfg.epsilon;
  row.n = n;
  row.accuracy = acc;
  return row;
}

}  // namespace detail

// Crafts on `craft`, evaluates on `target`; the building block of all
// scenarios.
inline double transfer_accuracy(const Pipeline& craft, const Pipeline& target,
                                const Dataset& ds,
                                const std::vector<size_t>& idx,
                                const AttackConfig& cfg) {
  AdversarialBatch batch = pgd(craft, ds, idx, cfg);
  check_feasible(batch, cfg.norm, cfg.epsilon);
  return accuracy_on_batch(target, batch, cfg.threads);
}

// Adversarial examples crafted directly on the public pre-trained model and
// transferred to the defended target.
inline EvalRow scenario_non_adaptive(const VitModel& m_o, const VitModel& m_k,
                                     const std::string& target_id,
                                     const Dataset& test,
                                     const std::vector<size_t>& idx,
                                     const AttackConfig& cfg) {
  if (m_o.cfg.image_h != m_k.cfg.image_h || m_o.cfg.image_w != m_k.cfg.image_w ||
      m_o.cfg.channels != m_k.cfg.channels)
    throw validation_error("non-adaptive scenario: model input dims differ");
  if (!m_k.key)
    throw validation_error("non-adaptive scenario: target model has no key");
  Pipeline craft(m_o, nullptr);
  Pipeline target(m_k, &*m_k.key);
  const double acc = transfer_accuracy(craft, target, test, idx, cfg);
  return detail::describe(m_k, target_id, "non_adaptive", cfg, idx.size(), acc);
}

// The gray-box adaptive attacker: fine-tune the public model with a guessed
// key, craft through the surrogate's full transform+classifier pipeline,
// transfer to the true defended model.
inline VitModel train_surrogate(const VitModel& m_o, uint64_t guessed_seed,
                                const VitModel& m_k, const DatasetPair& data,
                                const TrainConfig& cfg) {
  if (!m_k.key)
    throw validation_error("adaptive scenario: target model has no key");
  if (m_k.key->seed && *m_k.key->seed == guessed_seed)
    throw validation_error(
        "adaptive scenario: guessed seed equals the true key seed; "
        "that is a white-box attack, not a gray-box one");
  Key guessed = generate_key(guessed_seed, m_k.key->block_size,
                             m_k.key->channels);
  return finetune(m_o, guessed, data, cfg);
}

inline EvalRow scenario_adaptive(const VitModel& surrogate,
                                 const VitModel& m_k,
                                 const std::string& target_id,
                                 const Dataset& test,
                                 const std::vector<size_t>& idx,
                                 const AttackConfig& cfg) {
  if (!surrogate.key || !m_k.key)
    throw validation_error("adaptive scenario: both models must be keyed");
  if (surrogate.key->perm == m_k.key->perm)
    throw validation_error("adaptive scenario: surrogate key equals true key");
  Pipeline craft(surrogate, &*surrogate.key);
  Pipeline target(m_k, &*m_k.key);
  const double acc = transfer_accuracy(craft, target, test, idx, cfg);
  return detail::describe(m_k, target_id, "adaptive", cfg, idx.size(), acc);
}

// Upper-bound diagnostic: the attacker holds the true key and crafts
// through the defended pipeline itself.
inline EvalRow scenario_whitebox_oracle(const VitModel& m,
                                        const std::string& model_id,
                                        const Dataset& test,
                                        const std::vector<size_t>& idx,
                                        const AttackConfig& cfg) {
  Pipeline pipe(m, m.key ? &*m.key : nullptr);
  const double acc = transfer_accuracy(pipe, pipe, test, idx, cfg);
  return detail::describe(m, model_id, "whitebox", cfg, idx.size(), acc);
}

// ---- Audit dump: batch as a tensor container ----
// Same byte layout as checkpoints: u64 header length, JSON header, raw
// float32 payload (originals then deltas).
inline void save_batch(const AdversarialBatch& batch, const std::string& path) {
  if (batch.size() == 0) throw validation_error("save_batch: empty batch");
  const auto& x0 = batch.originals[0];
  const uint64_t per = uint64_t(x0.data.size()) * 4;
  nlohmann::json header;
  header["format"] = "keyfort-advbatch";
  header["version"] = 1;
  header["count"] = batch.size();
  header["dims"] = {x0.channels, x0.height, x0.width};
  header["labels"] = batch.labels;
  header["success"] = batch.success;
  header["tensors"] = {
      {{"name", "originals"},
       {"shape", {int(batch.size()), x0.channels, x0.height, x0.width}},
       {"offset", 0},
       {"nbytes", per * batch.size()}},
      {{"name", "deltas"},
       {"shape", {int(batch.size()), x0.channels, x0.height, x0.width}},
       {"offset", per * batch.size()},
       {"nbytes", per * batch.size()}}};
  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("save_batch: cannot open " + path);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& img : batch.originals)
    out.write(reinterpret_cast<const char*>(img.data.data()),
              std::streamsize(img.data.size() * 4));
  for (const auto& img : batch.deltas)
    out.write(reinterpret_cast<const char*>(img.data.data()),
              std::streamsize(img.data.size() * 4));
  if (!out) throw std::runtime_error("save_batch: write failed: " + path);
}

}  // namespace keyfort
