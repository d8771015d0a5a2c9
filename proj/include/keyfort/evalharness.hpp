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

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "keyfort/attacks.hpp"
#include "keyfort/report.hpp"

namespace keyfort {

// Fraction of argmax-correct predictions over explicit examples.
inline double accuracy(const Pipeline& pipe,
                       const std::vector<std::pair<ImageTensor, int>>& examples,
                       int threads = 0) {
  if (examples.empty())
    throw validation_error("accuracy: empty example set");
  const int W = threads > 0 ? threads : default_threads();
  std::vector<size_t> correct(size_t(W), 0);
  std::vector<ModelWorkspace> ws(static_cast<size_t>(W));
  parallel_for(examples.size(), W, [&](int w, size_t i) {
    if (pipe.predict(examples[i].first, ws[size_t(w)]) == examples[i].second)
      ++correct[size_t(w)];
  });
  size_t total = 0;
  for (size_t c : correct) total += c;
  return double(total) / double(examples.size());
}

// One cell request of the scenario grid. Clean cells ignore norm/epsilon.
struct ScenarioSpec {
  std::string name;  // "clean" | "whitebox" | "non_adaptive" | "adaptive"
  Norm norm = Norm::linf;
  float epsilon = 0.0f;
};

struct GridModel {
  std::string id;
  const VitModel* model = nullptr;
};

// Table-1-style grid: one row per (model, scenario spec), in request order.
// `pretrained` is the crafting source for non-adaptive cells; adaptive cells
// on keyed targets need `surrogate_for` to supply the guessed-key model (an
// unkeyed target degrades to crafting on the pre-trained model itself).
inline EvalReport run_grid(
    const std::vector<GridModel>& models,
    const std::vector<ScenarioSpec>& specs, const VitModel* pretrained,
    const std::function<const VitModel*(const std::string&)>& surrogate_for,
    const Dataset& test, const AttackConfig& base, size_t subset) {
  for (const auto& gm : models)
    if (gm.model->cfg.image_h != models[0].model->cfg.image_h ||
        gm.model->cfg.image_w != models[0].model->cfg.image_w ||
        gm.model->cfg.channels != models[0].model->cfg.channels)
      throw validation_error("grid: models disagree on input dims");
  const auto idx = first_n_indices(test, subset);
  EvalReport report;
  for (const auto& gm : models) {
    const VitModel& m = *gm.model;
    Pipeline self(m, m.key ? &*m.key : nullptr);
    for (const auto& spec : specs) {
      try {
        AttackConfig cfg = base;
        cfg.norm = spec.norm;
        cfg.epsilon = spec.epsilon;
        if (spec.name == "clean") {
          const double acc = dataset_accuracy(self, test, idx.size(),
                                              base.threads);
          report.rows.push_back(
              detail::describe(m, gm.id, "clean", cfg, idx.size(), acc));
        } else if (spec.name == "whitebox") {
          report.rows.push_back(
              scenario_whitebox_oracle(m, gm.id, test, idx, cfg));
        } else if (spec.name == "non_adaptive") {
          if (!pretrained)
            throw validation_error("grid: non_adaptive needs the pre-trained model");
          if (!m.key) {
            // plain target: crafting on the pre-trained model IS white-box
            Pipeline craft(*pretrained, nullptr);
            const double acc = transfer_accuracy(craft, self, test, idx, cfg);
            report.rows.push_back(
                detail::describe(m, gm.id, "non_adaptive", cfg, idx.size(), acc));
          } else {
            report.rows.push_back(
                scenario_non_adaptive(*pretrained, m, gm.id, test, idx, cfg));
          }
        } else if (spec.name == "adaptive") {
          if (!m.key) {
            if (!pretrained)
              throw validation_error("grid: adaptive needs the pre-trained model");
            Pipeline craft(*pretrained, nullptr);
            const double acc = transfer_accuracy(craft, self, test, idx, cfg);
            report.rows.push_back(
                detail::describe(m, gm.id, "adaptive", cfg, idx.size(), acc));
          } else {
            const VitModel* sur = surrogate_for ? surrogate_for(gm.id) : nullptr;
            if (!sur)
              throw validation_error("grid: no surrogate model for target " +
                                     gm.id);
            report.rows.push_back(
                scenario_adaptive(*sur, m, gm.id, test, idx, cfg));
          }
        } else {
          throw validation_error("grid: unknown scenario '" + spec.name + "'");
        }
      } catch (const validation_error&) {
        throw;
      } catch (const std::exception& e) {
        throw std::runtime_error("grid cell (" + gm.id + ", " + spec.name +
                                 ", " + to_string(spec.norm) +
                                 "): " + e.what());
      }
    }
  }
  return report;
}

// ---- Budget sweep ----

struct SweepTable {
  std::string scenario;
  std::string norm;
  std::vector<float> epsilons;
  std::vector<std::string> model_ids;
  std::vector<std::vector<double>> accuracy;  // [model][epsilon]

  // Plot-ready two-column TSV per model: epsilon <tab> accuracy.
  void write_tsv(const std::string& path_prefix) const {
    for (size_t m = 0; m < model_ids.size(); ++m) {
      const std::string path = path_prefix + model_ids[m] + ".tsv";
      std::ofstream out(path, std::ios::trunc);
      if (!out) throw validation_error("sweep: cannot open " + path);
      out << "epsilon\taccuracy\n";
      char line[64];
      for (size_t e = 0; e < epsilons.size(); ++e) {
        std::snprintf(line, sizeof line, "%.8f\t%.6f\n",
                      double(epsilons[e]), accuracy[m][e]);
        out << line;
      }
    }
  }
};

// Accuracy curves over an ascending budget list starting at 0; the 0 entry
// runs the identical clean pathway. Scenario semantics as in run_grid.
inline SweepTable epsilon_sweep(
    const std::vector<GridModel>& models, const std::string& scenario,
    Norm norm, const std::vector<float>& epsilons, const VitModel* pretrained,
    const std::function<const VitModel*(const std::string&)>& surrogate_for,
    const Dataset& test, const AttackConfig& base, size_t subset) {
  if (epsilons.empty() || epsilons.front() != 0.0f)
    throw validation_error("sweep: epsilon list must start at 0");
  for (size_t i = 1; i < epsilons.size(); ++i)
    if (!(epsilons[i] > epsilons[i - 1]))
      throw validation_error("sweep: epsilon list must be strictly ascending");
  SweepTable table;
  table.scenario = scenario;
  table.norm = to_string(norm);
  table.epsilons = epsilons;
  for (const auto& gm : models) table.model_ids.push_back(gm.id);
  table.accuracy.assign(models.size(), {});
  std::vector<ScenarioSpec> specs;
  for (float e : epsilons) specs.push_back({scenario, norm, e});
  EvalReport rep = run_grid(models, specs, pretrained, surrogate_for, test,
                            base, subset);
  size_t r = 0;
  for (size_t m = 0; m < models.size(); ++m)
    for (size_t e = 0; e < epsilons.size(); ++e)
      table.accuracy[m].push_back(rep.rows[r++].accuracy);
  return table;
}

// ---- Cross-key transfer matrix ----
// Entry (i, j): accuracy of model j on white-box adversarial examples
// crafted against model i. The diagonal is the oracle self-attack.
inline TransferMatrix transfer_matrix(
    const std::vector<GridModel>& models, const Dataset& test,
    const AttackConfig& cfg, size_t subset,
    bool allow_duplicate_keys = false) {
  if (models.size() < 2)
    throw validation_error("transfer matrix: need at least 2 models");
  for (const auto& gm : models) {
    if (!gm.model->key)
      throw validation_error("transfer matrix: model " + gm.id + " has no key");
    if (gm.model->cfg.image_h != models[0].model->cfg.image_h ||
        gm.model->cfg.channels != models[0].model->cfg.channels)
      throw validation_error("transfer matrix: architectures differ");
  }
  if (!allow_duplicate_keys) {
    for (size_t i = 0; i < models.size(); ++i)
      for (size_t j = i + 1; j < models.size(); ++j)
        if (models[i].model->key->perm == models[j].model->key->perm)
          throw validation_error("transfer matrix: models " + models[i].id +
                                 " and " + models[j].id +
                                 " share the same key");
  }
  const auto idx = first_n_indices(test, subset);
  TransferMatrix mat;
  mat.n_examples = idx.size();
  for (const auto& gm : models) mat.model_ids.push_back(gm.id);
  std::vector<Pipeline> pipes;
  pipes.reserve(models.size());
  for (const auto& gm : models)
    pipes.emplace_back(*gm.model, &*gm.model->key);
  for (const auto& pipe : pipes)
    mat.clean.push_back(dataset_accuracy(pipe, test, idx.size(), cfg.threads));
  for (size_t i = 0; i < models.size(); ++i) {
    AdversarialBatch batch = pgd(pipes[i], test, idx, cfg);
    check_feasible(batch, cfg.norm, cfg.epsilon);
    std::vector<double> row;
    for (size_t j = 0; j < models.size(); ++j)
      row.push_back(accuracy_on_batch(pipes[j], batch, cfg.threads));
    mat.acc.push_back(std::move(row));
  }
  return mat;
}

}  // namespace keyfort
