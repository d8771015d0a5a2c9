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

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/errors.hpp"

namespace keyfort {

// One accuracy cell of the scenario grid.
struct EvalRow {
  std::string model_id;
  std::string defense;   // "plain" | "key"
  int block_size = 0;    // 0 when plain
  std::string finetune;  // "no" | "full" | "lora"
  std::string scenario;  // "clean" | "whitebox" | "non_adaptive" | "adaptive"
  std::string norm;      // "none" | "linf" | "l2"
  double epsilon = 0.0;
  size_t n = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  static const char* csv_header() {
    return "model_id,defense,block_size,finetune,scenario,norm,epsilon,n,accuracy";
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw validation_error("report: cannot open " + path);
    out << csv_header() << "\n";
    char line[256];
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%s,%s,%d,%s,%s,%s,%.8f,%zu,%.6f\n",
                    r.model_id.c_str(), r.defense.c_str(), r.block_size,
                    r.finetune.c_str(), r.scenario.c_str(), r.norm.c_str(),
                    r.epsilon, r.n, r.accuracy);
      out << line;
    }
  }

  // Nested by model id.
  nlohmann::json to_json() const {
    nlohmann::json by_model = nlohmann::json::object();
    for (const auto& r : rows) {
      nlohmann::json cell{{"defense", r.defense},
                          {"block_size", r.block_size},
                          {"finetune", r.finetune},
                          {"scenario", r.scenario},
                          {"norm", r.norm},
                          {"epsilon", r.epsilon},
                          {"n", r.n},
                          {"accuracy", r.accuracy}};
      by_model[r.model_id].push_back(cell);
    }
    return nlohmann::json{{"models", by_model}};
  }

  void write_json(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw validation_error("report: cannot open " + path);
    out << to_json().dump(2) << "\n";
  }
};

// n x n accuracy grid; entry (i, j) is model j's accuracy on white-box
// adversarial examples crafted against model i.
struct TransferMatrix {
  std::vector<std::string> model_ids;
  std::vector<std::vector<double>> acc;    // [source][target]
  std::vector<double> clean;               // per-model clean accuracy
  size_t n_examples = 0;

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw validation_error("matrix: cannot open " + path);
    out << "source\\target";
    for (const auto& id : model_ids) out << "," << id;
    out << ",clean_of_source\n";
    char cell[48];
    for (size_t i = 0; i < acc.size(); ++i) {
      out << model_ids[i];
      for (size_t j = 0; j < acc[i].size(); ++j) {
        std::snprintf(cell, sizeof cell, ",%.6f", acc[i][j]);
        out << cell;
      }
      std::snprintf(cell, sizeof cell, ",%.6f\n", clean[i]);
      out << cell;
    }
  }
};

}  // namespace keyfort
