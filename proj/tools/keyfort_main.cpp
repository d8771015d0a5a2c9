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

// keyfort: keygen -> transform -> pretrain -> finetune/proliferate ->
// attack -> eval/matrix/sweep, with a replayable manifest next to every
// output. Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "keyfort/keyfort.hpp"

namespace fs = std::filesystem;
namespace kf = keyfort;
using nlohmann::json;

namespace {

// "4/255" or "0.5"
float parse_eps(const std::string& s) {
  const auto slash = s.find('/');
  try {
    if (slash == std::string::npos) return std::stof(s);
    const float num = std::stof(s.substr(0, slash));
    const float den = std::stof(s.substr(slash + 1));
    if (den == 0.0f) throw kf::validation_error("epsilon: division by zero");
    return num / den;
  } catch (const std::invalid_argument&) {
    throw kf::validation_error("epsilon: cannot parse '" + s + "'");
  }
}

std::vector<float> parse_eps_list(const std::string& s) {
  std::vector<float> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    const size_t comma = s.find(',', pos);
    const std::string tok =
        s.substr(pos, comma == std::string::npos ? std::string::npos
                                                 : comma - pos);
    if (!tok.empty()) out.push_back(parse_eps(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw kf::validation_error("empty epsilon list");
  return out;
}

std::string stem_of(const std::string& path) {
  return fs::path(path).stem().string();
}

kf::DatasetPair load_data(const json& cfg) {
  const std::string dir = cfg.at("data").get<std::string>();
  const std::string format = cfg.value("format", "cifar10");
  if (format == "cifar10") return kf::load_cifar10(dir);
  if (format == "idx") {
    kf::DatasetPair pair;
    pair.train = kf::load_idx((fs::path(dir) / "train-images-idx3-ubyte").string(),
                              (fs::path(dir) / "train-labels-idx1-ubyte").string(),
                              "train");
    pair.test = kf::load_idx((fs::path(dir) / "t10k-images-idx3-ubyte").string(),
                             (fs::path(dir) / "t10k-labels-idx1-ubyte").string(),
                             "test");
    pair.test.num_classes = pair.train.num_classes =
        std::max(pair.train.num_classes, pair.test.num_classes);
    return pair;
  }
  throw kf::validation_error("unknown data format: " + format);
}

void save_model_atomic(const kf::VitModel& m, const std::string& path) {
  const std::string tmp = path + ".partial";
  kf::save_model(m, tmp);
  fs::rename(tmp, path);
}

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

void emit_manifest(const std::string& command, const json& cfg,
                   std::vector<uint64_t> seeds,
                   std::vector<std::string> inputs,
                   std::vector<std::string> outputs, double wall,
                   const std::string& path) {
  kf::RunManifest m;
  m.command = command;
  m.resolved_config = cfg;
  m.seeds = std::move(seeds);
  m.input_paths = std::move(inputs);
  m.output_paths = std::move(outputs);
  m.wall_seconds = wall;
  m.reproducible = cfg.value("reproducible", true);
  kf::write_manifest(m, path);
}

// ---- keygen ----

int run_keygen(const json& cfg) {
  const auto out = cfg.at("out").get<std::string>();
  if (fs::exists(out) && !cfg.value("force", false))
    throw kf::validation_error("keygen: " + out +
                               " exists (use --force to overwrite)");
  Stopwatch sw;
  kf::Key key = kf::generate_key(cfg.at("seed").get<uint64_t>(),
                                 cfg.at("block_size").get<int>(),
                                 cfg.at("channels").get<int>());
  kf::write_text_atomic(out, kf::key_to_canonical_text(key));
  emit_manifest("keygen", cfg, {*key.seed}, {}, {out}, sw.seconds(),
                out + ".manifest.json");
  std::printf("wrote %s: perm length %zu, crc32 0x%08X\n", out.c_str(),
              key.block_len(), key.checksum());
  return 0;
}

// ---- transform ----

int run_transform(const json& cfg) {
  Stopwatch sw;
  const auto key_path = cfg.at("key").get<std::string>();
  kf::Key key = kf::load_key(key_path);
  const bool inverse = cfg.value("inverse", false);
  const auto out_dir = cfg.at("out").get<std::string>();
  fs::create_directories(out_dir);
  kf::DatasetPair pair = load_data(cfg);
  std::vector<std::string> outputs;

  auto permute_split = [&](kf::Dataset& ds) {
    kf::PermutationMap map(key, ds.height, ds.width);
    std::vector<uint8_t> tmp(ds.image_bytes());
    for (size_t i = 0; i < ds.size(); ++i) {
      uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
      if (inverse)
        map.apply_inverse(img, tmp.data());
      else
        map.apply(img, tmp.data());
      std::copy(tmp.begin(), tmp.end(), img);
    }
  };
  permute_split(pair.train);
  permute_split(pair.test);

  const std::string format = cfg.value("format", "cifar10");
  if (format == "cifar10") {
    for (int b = 0; b < 5; ++b) {
      const std::string p =
          (fs::path(out_dir) / ("data_batch_" + std::to_string(b + 1) + ".bin"))
              .string();
      kf::write_cifar_batch(p, pair.train, size_t(b) * kf::kCifarPerBatch,
                            kf::kCifarPerBatch);
      outputs.push_back(p);
    }
    const std::string p = (fs::path(out_dir) / "test_batch.bin").string();
    kf::write_cifar_batch(p, pair.test, 0, kf::kCifarPerBatch);
    outputs.push_back(p);
  } else {
    const std::string ti = (fs::path(out_dir) / "train-images-idx3-ubyte").string();
    const std::string tl = (fs::path(out_dir) / "train-labels-idx1-ubyte").string();
    const std::string vi = (fs::path(out_dir) / "t10k-images-idx3-ubyte").string();
    const std::string vl = (fs::path(out_dir) / "t10k-labels-idx1-ubyte").string();
    kf::write_idx(pair.train, ti, tl);
    kf::write_idx(pair.test, vi, vl);
    outputs.insert(outputs.end(), {ti, tl, vi, vl});
  }

  const int previews = cfg.value("export_ppm", 0);
  for (int i = 0; i < previews && size_t(i) < pair.test.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "preview_%04d.%s", i,
                  pair.test.channels == 3 ? "ppm" : "pgm");
    const std::string p = (fs::path(out_dir) / name).string();
    kf::export_ppm(pair.test.image(size_t(i)), p);
    outputs.push_back(p);
  }

  emit_manifest("transform", cfg, {}, {key_path}, outputs, sw.seconds(),
                (fs::path(out_dir) / "manifest.json").string());
  std::printf("transformed dataset written to %s (%zu files)\n",
              out_dir.c_str(), outputs.size());
  return 0;
}

// ---- pretrain / finetune / proliferate ----

kf::ModelConfig model_config_of(const json& cfg, const kf::Dataset& train) {
  kf::ModelConfig mc;
  if (cfg.contains("model_config")) mc = kf::config_from_json(cfg.at("model_config"));
  mc.image_h = train.height;
  mc.image_w = train.width;
  mc.channels = train.channels;
  mc.num_classes = train.num_classes;
  kf::validate_config(mc);
  return mc;
}

void write_train_outputs(const kf::VitModel& m, const kf::TrainReport& rep,
                         const json& cfg, const std::string& command,
                         std::vector<uint64_t> seeds,
                         std::vector<std::string> inputs, double wall) {
  const auto out = cfg.at("out").get<std::string>();
  save_model_atomic(m, out);
  std::vector<std::string> outputs{out};
  if (cfg.contains("report_json")) {
    kf::TrainReport r = rep;
    r.checkpoint_path = out;
    kf::write_text_atomic(cfg.at("report_json").get<std::string>(),
                          r.to_json().dump(2) + "\n");
    outputs.push_back(cfg.at("report_json").get<std::string>());
  }
  if (cfg.contains("report_csv")) {
    rep.append_csv(cfg.at("report_csv").get<std::string>());
    outputs.push_back(cfg.at("report_csv").get<std::string>());
  }
  emit_manifest(command, cfg, std::move(seeds), std::move(inputs), outputs,
                wall, out + ".manifest.json");
  const auto& last = rep.epochs.empty() ? kf::EpochStats{} : rep.epochs.back();
  std::printf("wrote %s (final val acc %.4f)\n", out.c_str(), last.val_acc);
}

int run_pretrain(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::TrainConfig tc = kf::train_config_from_json(cfg.at("train"));
  if (tc.mode != kf::TrainMode::pretrain)
    throw kf::validation_error("pretrain: train.mode must be 'pretrain'");
  const kf::ModelConfig mc = model_config_of(cfg, data.train);
  kf::TrainReport rep;
  kf::VitModel m = kf::pretrain(mc, data, tc, &rep);
  write_train_outputs(m, rep, cfg, "pretrain", {tc.seed},
                      {cfg.at("data").get<std::string>()}, sw.seconds());
  return 0;
}

int run_finetune(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::TrainConfig tc = kf::train_config_from_json(cfg.at("train"));
  if (tc.mode == kf::TrainMode::pretrain)
    throw kf::validation_error(
        "finetune: train.mode must be finetune_full or finetune_lora");
  const auto m0_path = cfg.at("pretrained").get<std::string>();
  const auto key_path = cfg.at("key").get<std::string>();
  kf::VitModel m0 = kf::load_model(m0_path);
  kf::Key key = kf::load_key(key_path);
  kf::TrainReport rep;
  kf::VitModel m = kf::finetune(m0, key, data, tc, &rep);
  write_train_outputs(m, rep, cfg, "finetune", {tc.seed},
                      {m0_path, key_path, cfg.at("data").get<std::string>()},
                      sw.seconds());
  return 0;
}

int run_proliferate(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::TrainConfig tc = kf::train_config_from_json(cfg.at("train"));
  if (tc.mode == kf::TrainMode::pretrain)
    throw kf::validation_error(
        "proliferate: train.mode must be finetune_full or finetune_lora");
  const auto m0_path = cfg.at("pretrained").get<std::string>();
  const auto out_dir = cfg.at("out_dir").get<std::string>();
  const auto seeds = cfg.at("seeds").get<std::vector<uint64_t>>();
  const int block_size = cfg.at("block_size").get<int>();
  fs::create_directories(out_dir);
  kf::VitModel m0 = kf::load_model(m0_path);
  auto defended =
      kf::proliferate(m0, seeds, block_size, data, tc, nullptr);
  std::vector<std::string> outputs;
  for (size_t i = 0; i < defended.size(); ++i) {
    const std::string tag = std::to_string(seeds[i]);
    const std::string kp =
        (fs::path(out_dir) / ("key_" + tag + ".json")).string();
    const std::string mp =
        (fs::path(out_dir) / ("model_" + tag + ".ckpt")).string();
    kf::write_text_atomic(kp, kf::key_to_canonical_text(defended[i].first));
    save_model_atomic(defended[i].second, mp);
    outputs.push_back(kp);
    outputs.push_back(mp);
  }
  emit_manifest("proliferate", cfg, seeds,
                {m0_path, cfg.at("data").get<std::string>()}, outputs,
                sw.seconds(), (fs::path(out_dir) / "manifest.json").string());
  std::printf("proliferated %zu defended models into %s\n", defended.size(),
              out_dir.c_str());
  return 0;
}

// ---- attack ----

int run_attack(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::AttackConfig ac = kf::attack_config_from_json(cfg.at("attack"));
  const auto model_path = cfg.at("model").get<std::string>();
  kf::VitModel m = kf::load_model(model_path);
  kf::Pipeline pipe(m, m.key ? &*m.key : nullptr);
  const auto idx =
      kf::first_n_indices(data.test, cfg.value("subset", size_t(0)));
  kf::AdversarialBatch batch = kf::pgd(pipe, data.test, idx, ac);
  kf::check_feasible(batch, ac.norm, ac.epsilon);
  size_t fooled = 0;
  for (uint8_t s : batch.success) fooled += s;
  std::vector<std::string> outputs;
  const auto out = cfg.at("out").get<std::string>();
  {
    const std::string tmp = out + ".partial";
    kf::save_batch(batch, tmp);
    fs::rename(tmp, out);
    outputs.push_back(out);
  }
  if (cfg.contains("report_json")) {
    json rep{{"model", model_path},
             {"n", batch.size()},
             {"success_rate", double(fooled) / double(batch.size())},
             {"crafting_accuracy", 1.0 - double(fooled) / double(batch.size())},
             {"attack", kf::attack_config_to_json(ac)}};
    kf::write_text_atomic(cfg.at("report_json").get<std::string>(),
                          rep.dump(2) + "\n");
    outputs.push_back(cfg.at("report_json").get<std::string>());
  }
  emit_manifest("attack", cfg, {ac.seed},
                {model_path, cfg.at("data").get<std::string>()}, outputs,
                sw.seconds(), out + ".manifest.json");
  std::printf("attack success rate on crafting model: %.4f (%zu/%zu)\n",
              double(fooled) / double(batch.size()), fooled, batch.size());
  return 0;
}

// ---- eval ----

int run_eval(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::AttackConfig base = kf::attack_config_from_json(cfg.at("attack"));
  const auto target_paths = cfg.at("targets").get<std::vector<std::string>>();
  if (target_paths.empty()) throw kf::validation_error("eval: no targets");
  std::vector<kf::VitModel> models;
  std::vector<kf::GridModel> grid;
  models.reserve(target_paths.size());
  for (const auto& p : target_paths) models.push_back(kf::load_model(p));
  for (size_t i = 0; i < models.size(); ++i)
    grid.push_back({stem_of(target_paths[i]), &models[i]});

  kf::VitModel pretrained;
  const kf::VitModel* m0 = nullptr;
  if (cfg.contains("pretrained")) {
    pretrained = kf::load_model(cfg.at("pretrained").get<std::string>());
    m0 = &pretrained;
  }
  std::vector<kf::VitModel> surrogate_models;
  std::map<std::string, const kf::VitModel*> surrogate_by_target;
  if (cfg.contains("surrogates")) {
    const auto paths = cfg.at("surrogates").get<std::vector<std::string>>();
    if (paths.size() != target_paths.size() && paths.size() != 1)
      throw kf::validation_error(
          "eval: --surrogate count must be 1 or match --target count");
    surrogate_models.reserve(paths.size());
    for (const auto& p : paths) surrogate_models.push_back(kf::load_model(p));
    for (size_t i = 0; i < grid.size(); ++i)
      surrogate_by_target[grid[i].id] =
          &surrogate_models[paths.size() == 1 ? 0 : i];
  }

  std::vector<kf::ScenarioSpec> specs;
  const auto scenarios = cfg.at("scenarios").get<std::vector<std::string>>();
  const auto budgets = cfg.at("budgets");  // [{norm, epsilon}]
  for (const auto& s : scenarios) {
    if (s == "clean") {
      specs.push_back({"clean", kf::Norm::linf, 0.0f});
      continue;
    }
    for (const auto& b : budgets)
      specs.push_back({s, kf::norm_from_string(b.at("norm").get<std::string>()),
                       b.at("epsilon").get<float>()});
  }
  if (specs.empty()) throw kf::validation_error("eval: no scenario cells");

  auto surrogate_for = [&](const std::string& id) -> const kf::VitModel* {
    auto it = surrogate_by_target.find(id);
    return it == surrogate_by_target.end() ? nullptr : it->second;
  };
  kf::EvalReport report =
      kf::run_grid(grid, specs, m0, surrogate_for, data.test, base,
                   cfg.value("subset", size_t(0)));

  std::vector<std::string> outputs;
  const auto out_csv = cfg.at("out").get<std::string>();
  {
    const std::string tmp = out_csv + ".partial";
    report.write_csv(tmp);
    fs::rename(tmp, out_csv);
    outputs.push_back(out_csv);
  }
  if (cfg.contains("out_json")) {
    kf::write_text_atomic(cfg.at("out_json").get<std::string>(),
                          report.to_json().dump(2) + "\n");
    outputs.push_back(cfg.at("out_json").get<std::string>());
  }
  std::vector<std::string> inputs = target_paths;
  inputs.push_back(cfg.at("data").get<std::string>());
  emit_manifest("eval", cfg, {base.seed}, inputs, outputs, sw.seconds(),
                out_csv + ".manifest.json");
  for (const auto& r : report.rows)
    std::printf("%-20s %-13s %-5s eps=%-9.6f n=%-6zu acc=%.4f\n",
                r.model_id.c_str(), r.scenario.c_str(), r.norm.c_str(),
                r.epsilon, r.n, r.accuracy);
  return 0;
}

// ---- matrix ----

int run_matrix(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::AttackConfig ac = kf::attack_config_from_json(cfg.at("attack"));
  const auto model_paths = cfg.at("models").get<std::vector<std::string>>();
  std::vector<kf::VitModel> models;
  std::vector<kf::GridModel> grid;
  models.reserve(model_paths.size());
  for (const auto& p : model_paths) models.push_back(kf::load_model(p));
  for (size_t i = 0; i < models.size(); ++i)
    grid.push_back({stem_of(model_paths[i]), &models[i]});
  kf::TransferMatrix mat = kf::transfer_matrix(
      grid, data.test, ac, cfg.value("subset", size_t(0)));
  const auto out = cfg.at("out").get<std::string>();
  {
    const std::string tmp = out + ".partial";
    mat.write_csv(tmp);
    fs::rename(tmp, out);
  }
  std::vector<std::string> inputs = model_paths;
  inputs.push_back(cfg.at("data").get<std::string>());
  emit_manifest("matrix", cfg, {ac.seed}, inputs, {out}, sw.seconds(),
                out + ".manifest.json");
  for (size_t i = 0; i < mat.acc.size(); ++i) {
    std::printf("%-16s", mat.model_ids[i].c_str());
    for (double a : mat.acc[i]) std::printf(" %.4f", a);
    std::printf("   (clean %.4f)\n", mat.clean[i]);
  }
  return 0;
}

// ---- sweep ----

int run_sweep(const json& cfg) {
  Stopwatch sw;
  kf::DatasetPair data = load_data(cfg);
  kf::AttackConfig base = kf::attack_config_from_json(cfg.at("attack"));
  const auto model_paths = cfg.at("models").get<std::vector<std::string>>();
  std::vector<kf::VitModel> models;
  std::vector<kf::GridModel> grid;
  models.reserve(model_paths.size());
  for (const auto& p : model_paths) models.push_back(kf::load_model(p));
  for (size_t i = 0; i < models.size(); ++i)
    grid.push_back({stem_of(model_paths[i]), &models[i]});

  kf::VitModel pretrained;
  const kf::VitModel* m0 = nullptr;
  if (cfg.contains("pretrained")) {
    pretrained = kf::load_model(cfg.at("pretrained").get<std::string>());
    m0 = &pretrained;
  }
  kf::VitModel surrogate;
  const kf::VitModel* sur = nullptr;
  if (cfg.contains("surrogate")) {
    surrogate = kf::load_model(cfg.at("surrogate").get<std::string>());
    sur = &surrogate;
  }
  auto surrogate_for = [&](const std::string&) { return sur; };

  kf::SweepTable table = kf::epsilon_sweep(
      grid, cfg.value("scenario", std::string("whitebox")),
      kf::norm_from_string(cfg.at("norm").get<std::string>()),
      cfg.at("eps_list").get<std::vector<float>>(), m0, surrogate_for,
      data.test, base, cfg.value("subset", size_t(0)));

  const auto prefix = cfg.at("out_prefix").get<std::string>();
  table.write_tsv(prefix);
  std::vector<std::string> outputs;
  for (const auto& id : table.model_ids) outputs.push_back(prefix + id + ".tsv");
  std::vector<std::string> inputs = model_paths;
  inputs.push_back(cfg.at("data").get<std::string>());
  emit_manifest("sweep", cfg, {base.seed}, inputs, outputs, sw.seconds(),
                prefix + "manifest.json");
  for (size_t m = 0; m < table.model_ids.size(); ++m) {
    std::printf("%-16s", table.model_ids[m].c_str());
    for (double a : table.accuracy[m]) std::printf(" %.4f", a);
    std::printf("\n");
  }
  return 0;
}

int dispatch(const std::string& command, const json& cfg) {
  if (command == "keygen") return run_keygen(cfg);
  if (command == "transform") return run_transform(cfg);
  if (command == "pretrain") return run_pretrain(cfg);
  if (command == "finetune") return run_finetune(cfg);
  if (command == "proliferate") return run_proliferate(cfg);
  if (command == "attack") return run_attack(cfg);
  if (command == "eval") return run_eval(cfg);
  if (command == "matrix") return run_matrix(cfg);
  if (command == "sweep") return run_sweep(cfg);
  throw kf::validation_error("unknown command in manifest: " + command);
}

int run_replay(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw kf::validation_error("replay: cannot open " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw kf::validation_error("replay: malformed manifest: " +
                               std::string(e.what()));
  }
  const std::string command = manifest.at("command").get<std::string>();
  std::printf("replaying %s from %s\n", command.c_str(),
              manifest_path.c_str());
  return dispatch(command, manifest.at("config"));
}

// Attack flag block shared by attack/eval/matrix/sweep.
struct AttackFlags {
  std::string norm = "linf";
  std::string eps = "4/255";
  int steps = 10;
  std::string step_size;
  uint64_t seed = 0;
  bool no_random_start = false;
  int targeted_label = -1;

  void attach(CLI::App* app, bool with_budget = true) {
    if (with_budget) {
      app->add_option("--norm", norm, "perturbation norm: linf or l2");
      app->add_option("--eps", eps, "budget, e.g. 4/255 or 0.5");
    }
    app->add_option("--steps", steps, "attack iterations");
    app->add_option("--step-size", step_size, "step size (default eps/4)");
    app->add_option("--attack-seed", seed, "attack randomness seed");
    app->add_flag("--no-random-start", no_random_start, "start from delta=0");
    app->add_option("--target-label", targeted_label,
                    "targeted attack toward this label");
  }

  json to_json(int threads) const {
    json j{{"norm", norm},
           {"epsilon", parse_eps(eps)},
           {"steps", steps},
           {"random_start", !no_random_start},
           {"seed", seed},
           {"threads", threads}};
    if (!step_size.empty()) j["step_size"] = parse_eps(step_size);
    if (targeted_label >= 0) {
      j["targeted"] = true;
      j["target_label"] = targeted_label;
    }
    return j;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keyfort: key-based adversarial defense toolkit"};
  app.require_subcommand(1);

  int threads = 0;  // 0 = KEYFORT_THREADS env or hardware concurrency
  app.add_option("--threads", threads, "worker threads (default: KEYFORT_THREADS or all cores)");

  // keygen
  auto* keygen = app.add_subcommand("keygen", "generate a shuffle key");
  uint64_t kg_seed = 0;
  int kg_block = 4, kg_channels = 3;
  std::string kg_out = "key.json";
  bool kg_force = false;
  keygen->add_option("--seed", kg_seed, "key seed")->required();
  keygen->add_option("--block-size", kg_block, "shuffle block size P")->required();
  keygen->add_option("--channels", kg_channels, "image channels C");
  keygen->add_option("--out", kg_out, "output key file");
  keygen->add_flag("--force", kg_force, "overwrite existing file");

  // transform
  auto* transform = app.add_subcommand("transform", "shuffle a dataset with a key");
  std::string tf_key, tf_in, tf_out, tf_format = "cifar10";
  bool tf_inverse = false;
  int tf_ppm = 0;
  transform->add_option("--key", tf_key, "key file")->required();
  transform->add_option("--in", tf_in, "input dataset directory")->required();
  transform->add_option("--out", tf_out, "output directory")->required();
  transform->add_option("--format", tf_format, "cifar10 or idx");
  transform->add_flag("--inverse", tf_inverse, "apply the inverse shuffle");
  transform->add_option("--export-ppm", tf_ppm, "write n preview images");

  // shared training flags
  struct TrainFlags {
    std::string data, format = "cifar10", config, out, report_json, report_csv;
    int epochs = -1, batch = -1;
    double lr = -1;
    uint64_t seed = 0;
    bool seed_set = false;
    size_t subset = 0, val_subset = 0;
    bool no_flip = false, verbose = false, timings = false;
  };
  auto attach_train = [&](CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--data", f.data, "dataset directory")->required();
    cmd->add_option("--format", f.format, "cifar10 or idx");
    cmd->add_option("--config", f.config, "train config JSON (flags override)");
    cmd->add_option("--out", f.out, "output checkpoint")->required();
    cmd->add_option("--report", f.report_json, "write train report JSON");
    cmd->add_option("--report-csv", f.report_csv, "append per-epoch CSV rows");
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--batch", f.batch, "batch size");
    cmd->add_option("--lr", f.lr, "peak learning rate");
    cmd->add_option("--seed", f.seed, "training seed");
    cmd->add_option("--subset", f.subset, "train on a seeded n-example subset");
    cmd->add_option("--val-subset", f.val_subset, "validation subset size");
    cmd->add_flag("--no-flip", f.no_flip, "disable horizontal-flip augmentation");
    cmd->add_flag("--verbose", f.verbose, "per-epoch progress on stderr");
    cmd->add_flag("--timings", f.timings, "record wall clock (breaks byte-reproducibility)");
  };
  auto train_json = [&](CLI::App* cmd, const TrainFlags& f,
                        const std::string& mode) {
    json tj;
    if (!f.config.empty()) {
      std::ifstream in(f.config);
      if (!in) throw kf::validation_error("cannot open config: " + f.config);
      in >> tj;
    }
    tj["mode"] = mode;
    if (cmd->count("--epochs")) tj["epochs"] = f.epochs;
    if (cmd->count("--batch")) tj["batch_size"] = f.batch;
    if (cmd->count("--lr")) tj["lr"] = f.lr;
    if (cmd->count("--seed")) tj["seed"] = f.seed;
    if (cmd->count("--subset")) tj["train_subset"] = f.subset;
    if (cmd->count("--val-subset")) tj["val_subset"] = f.val_subset;
    if (f.no_flip) tj["augment_flip"] = false;
    if (f.timings) tj["reproducible"] = false;
    tj["threads"] = threads;
    // normalize through the struct so the manifest holds the full config
    kf::TrainConfig tc = kf::train_config_from_json(tj);
    tc.verbose = f.verbose;
    json resolved = kf::train_config_to_json(tc);
    return resolved;
  };

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "train the plain model");
  TrainFlags pt;
  attach_train(pretrain_cmd, pt);
  std::string pt_model_config;
  pretrain_cmd->add_option("--model-config", pt_model_config,
                           "model architecture JSON");

  // finetune
  auto* finetune_cmd = app.add_subcommand("finetune", "keyed fine-tuning");
  TrainFlags ft;
  attach_train(finetune_cmd, ft);
  std::string ft_pretrained, ft_key, ft_mode = "full";
  int ft_rank = 16;
  double ft_alpha = 16.0;
  finetune_cmd->add_option("--pretrained", ft_pretrained, "pre-trained checkpoint")->required();
  finetune_cmd->add_option("--key", ft_key, "key file")->required();
  finetune_cmd->add_option("--mode", ft_mode, "full or lora");
  finetune_cmd->add_option("--rank", ft_rank, "LoRA rank");
  finetune_cmd->add_option("--alpha", ft_alpha, "LoRA scaling factor");

  // proliferate
  auto* prolif_cmd = app.add_subcommand("proliferate", "fine-tune one model per key seed");
  TrainFlags pl;
  std::string pl_pretrained, pl_out_dir, pl_seeds, pl_mode = "full";
  int pl_block = 4, pl_rank = 16;
  double pl_alpha = 16.0;
  pl.out = "-";  // unused; proliferate writes into --out-dir
  prolif_cmd->add_option("--data", pl.data, "dataset directory")->required();
  prolif_cmd->add_option("--format", pl.format, "cifar10 or idx");
  prolif_cmd->add_option("--config", pl.config, "train config JSON");
  prolif_cmd->add_option("--pretrained", pl_pretrained, "pre-trained checkpoint")->required();
  prolif_cmd->add_option("--out-dir", pl_out_dir, "output directory")->required();
  prolif_cmd->add_option("--seeds", pl_seeds, "comma list of key seeds")->required();
  prolif_cmd->add_option("--block-size", pl_block, "shuffle block size P");
  prolif_cmd->add_option("--mode", pl_mode, "full or lora");
  prolif_cmd->add_option("--rank", pl_rank, "LoRA rank");
  prolif_cmd->add_option("--alpha", pl_alpha, "LoRA scaling factor");
  prolif_cmd->add_option("--epochs", pl.epochs, "training epochs");
  prolif_cmd->add_option("--batch", pl.batch, "batch size");
  prolif_cmd->add_option("--lr", pl.lr, "peak learning rate");
  prolif_cmd->add_option("--seed", pl.seed, "training seed");
  prolif_cmd->add_option("--subset", pl.subset, "train subset");
  prolif_cmd->add_option("--val-subset", pl.val_subset, "validation subset");
  prolif_cmd->add_flag("--no-flip", pl.no_flip, "disable flip augmentation");
  prolif_cmd->add_flag("--verbose", pl.verbose, "per-epoch progress");
  prolif_cmd->add_flag("--timings", pl.timings, "record wall clock");

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "craft adversarial examples");
  std::string at_model, at_data, at_format = "cifar10", at_out = "batch.kfb",
              at_report;
  size_t at_subset = 0;
  AttackFlags at_flags;
  attack_cmd->add_option("--model", at_model, "crafting checkpoint")->required();
  attack_cmd->add_option("--data", at_data, "dataset directory")->required();
  attack_cmd->add_option("--format", at_format, "cifar10 or idx");
  attack_cmd->add_option("--out", at_out, "adversarial batch container");
  attack_cmd->add_option("--report", at_report, "write attack report JSON");
  attack_cmd->add_option("--subset", at_subset, "attack first n test images");
  at_flags.attach(attack_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "scenario grid accuracy");
  std::vector<std::string> ev_targets, ev_surrogates, ev_scenarios, ev_budgets;
  std::string ev_data, ev_format = "cifar10", ev_pretrained, ev_out = "report.csv",
              ev_json;
  size_t ev_subset = 0;
  AttackFlags ev_flags;
  eval_cmd->add_option("--target", ev_targets, "target checkpoint (repeatable)")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--format", ev_format, "cifar10 or idx");
  eval_cmd->add_option("--scenario", ev_scenarios,
                       "clean|whitebox|non_adaptive|adaptive (repeatable)")
      ->required();
  eval_cmd->add_option("--budget", ev_budgets,
                       "norm=eps, e.g. linf=4/255 (repeatable)");
  eval_cmd->add_option("--pretrained", ev_pretrained,
                       "plain model for non_adaptive crafting");
  eval_cmd->add_option("--surrogate", ev_surrogates,
                       "guessed-key model(s) for adaptive");
  eval_cmd->add_option("--subset", ev_subset, "evaluate first n test images");
  eval_cmd->add_option("--out", ev_out, "report CSV path");
  eval_cmd->add_option("--json", ev_json, "report JSON path");
  ev_flags.attach(eval_cmd, /*with_budget=*/false);

  // matrix
  auto* matrix_cmd = app.add_subcommand("matrix", "cross-key transfer matrix");
  std::vector<std::string> mx_models;
  std::string mx_data, mx_format = "cifar10", mx_out = "matrix.csv";
  size_t mx_subset = 0;
  AttackFlags mx_flags;
  matrix_cmd->add_option("--models", mx_models, "keyed checkpoints")->required()->expected(-2);
  matrix_cmd->add_option("--data", mx_data, "dataset directory")->required();
  matrix_cmd->add_option("--format", mx_format, "cifar10 or idx");
  matrix_cmd->add_option("--subset", mx_subset, "first n test images");
  matrix_cmd->add_option("--out", mx_out, "matrix CSV path");
  mx_flags.attach(matrix_cmd);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "accuracy across budgets");
  std::vector<std::string> sw_models;
  std::string sw_data, sw_format = "cifar10", sw_scenario = "whitebox",
              sw_norm = "linf", sw_eps_list = "0,1/255,2/255,4/255,8/255",
              sw_prefix = "sweep_", sw_pretrained, sw_surrogate;
  size_t sw_subset = 0;
  AttackFlags sw_flags;
  sweep_cmd->add_option("--models", sw_models, "checkpoints to sweep")->required()->expected(-1);
  sweep_cmd->add_option("--data", sw_data, "dataset directory")->required();
  sweep_cmd->add_option("--format", sw_format, "cifar10 or idx");
  sweep_cmd->add_option("--scenario", sw_scenario, "whitebox|non_adaptive|adaptive");
  sweep_cmd->add_option("--norm", sw_norm, "linf or l2");
  sweep_cmd->add_option("--eps-list", sw_eps_list, "comma budgets, first 0");
  sweep_cmd->add_option("--pretrained", sw_pretrained, "plain model for non_adaptive");
  sweep_cmd->add_option("--surrogate", sw_surrogate, "guessed-key model for adaptive");
  sweep_cmd->add_option("--subset", sw_subset, "first n test images");
  sweep_cmd->add_option("--out-prefix", sw_prefix, "TSV path prefix");
  sw_flags.attach(sweep_cmd, /*with_budget=*/false);

  // replay
  auto* replay_cmd = app.add_subcommand("replay", "re-run a recorded manifest");
  std::string rp_manifest;
  replay_cmd->add_option("manifest", rp_manifest, "manifest JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*keygen) {
      json cfg{{"seed", kg_seed},
               {"block_size", kg_block},
               {"channels", kg_channels},
               {"out", kg_out},
               {"force", kg_force}};
      return run_keygen(cfg);
    }
    if (*transform) {
      json cfg{{"key", tf_key},     {"data", tf_in},
               {"out", tf_out},     {"format", tf_format},
               {"inverse", tf_inverse}, {"export_ppm", tf_ppm}};
      return run_transform(cfg);
    }
    if (*pretrain_cmd) {
      json cfg{{"data", pt.data}, {"format", pt.format}, {"out", pt.out}};
      if (!pt.report_json.empty()) cfg["report_json"] = pt.report_json;
      if (!pt.report_csv.empty()) cfg["report_csv"] = pt.report_csv;
      if (!pt_model_config.empty()) {
        std::ifstream in(pt_model_config);
        if (!in)
          throw kf::validation_error("cannot open model config: " + pt_model_config);
        json mj;
        in >> mj;
        cfg["model_config"] = mj;
      }
      cfg["train"] = train_json(pretrain_cmd, pt, "pretrain");
      cfg["reproducible"] = cfg["train"]["reproducible"];
      return run_pretrain(cfg);
    }
    if (*finetune_cmd) {
      json cfg{{"data", ft.data},
               {"format", ft.format},
               {"out", ft.out},
               {"pretrained", ft_pretrained},
               {"key", ft_key}};
      if (!ft.report_json.empty()) cfg["report_json"] = ft.report_json;
      if (!ft.report_csv.empty()) cfg["report_csv"] = ft.report_csv;
      cfg["train"] = train_json(
          finetune_cmd, ft,
          ft_mode == "lora" ? "finetune_lora" : "finetune_full");
      if (finetune_cmd->count("--rank")) cfg["train"]["lora_rank"] = ft_rank;
      if (finetune_cmd->count("--alpha")) cfg["train"]["lora_alpha"] = ft_alpha;
      cfg["reproducible"] = cfg["train"]["reproducible"];
      return run_finetune(cfg);
    }
    if (*prolif_cmd) {
      std::vector<uint64_t> seeds;
      {
        size_t pos = 0;
        while (pos <= pl_seeds.size()) {
          const size_t comma = pl_seeds.find(',', pos);
          const std::string tok = pl_seeds.substr(
              pos,
              comma == std::string::npos ? std::string::npos : comma - pos);
          if (!tok.empty()) seeds.push_back(std::stoull(tok));
          if (comma == std::string::npos) break;
          pos = comma + 1;
        }
      }
      json cfg{{"data", pl.data},
               {"format", pl.format},
               {"pretrained", pl_pretrained},
               {"out_dir", pl_out_dir},
               {"seeds", seeds},
               {"block_size", pl_block}};
      cfg["train"] = train_json(
          prolif_cmd, pl, pl_mode == "lora" ? "finetune_lora" : "finetune_full");
      if (prolif_cmd->count("--rank")) cfg["train"]["lora_rank"] = pl_rank;
      if (prolif_cmd->count("--alpha")) cfg["train"]["lora_alpha"] = pl_alpha;
      cfg["reproducible"] = cfg["train"]["reproducible"];
      return run_proliferate(cfg);
    }
    if (*attack_cmd) {
      json cfg{{"data", at_data},   {"format", at_format},
               {"model", at_model}, {"out", at_out},
               {"subset", at_subset}};
      if (!at_report.empty()) cfg["report_json"] = at_report;
      cfg["attack"] = at_flags.to_json(threads);
      return run_attack(cfg);
    }
    if (*eval_cmd) {
      json budgets = json::array();
      for (const auto& b : ev_budgets) {
        const auto eq = b.find('=');
        if (eq == std::string::npos)
          throw kf::validation_error("eval: budget must be norm=eps, got " + b);
        budgets.push_back({{"norm", b.substr(0, eq)},
                           {"epsilon", parse_eps(b.substr(eq + 1))}});
      }
      bool needs_budget = false;
      for (const auto& s : ev_scenarios)
        if (s != "clean") needs_budget = true;
      if (needs_budget && budgets.empty())
        throw kf::validation_error(
            "eval: attacked scenarios need at least one --budget norm=eps");
      json cfg{{"data", ev_data},       {"format", ev_format},
               {"targets", ev_targets}, {"scenarios", ev_scenarios},
               {"budgets", budgets},    {"subset", ev_subset},
               {"out", ev_out}};
      if (!ev_pretrained.empty()) cfg["pretrained"] = ev_pretrained;
      if (!ev_surrogates.empty()) cfg["surrogates"] = ev_surrogates;
      if (!ev_json.empty()) cfg["out_json"] = ev_json;
      cfg["attack"] = ev_flags.to_json(threads);
      return run_eval(cfg);
    }
    if (*matrix_cmd) {
      json cfg{{"data", mx_data},     {"format", mx_format},
               {"models", mx_models}, {"subset", mx_subset},
               {"out", mx_out}};
      cfg["attack"] = mx_flags.to_json(threads);
      return run_matrix(cfg);
    }
    if (*sweep_cmd) {
      json cfg{{"data", sw_data},
               {"format", sw_format},
               {"models", sw_models},
               {"scenario", sw_scenario},
               {"norm", sw_norm},
               {"subset", sw_subset},
               {"out_prefix", sw_prefix}};
      cfg["eps_list"] = parse_eps_list(sw_eps_list);
      if (!sw_pretrained.empty()) cfg["pretrained"] = sw_pretrained;
      if (!sw_surrogate.empty()) cfg["surrogate"] = sw_surrogate;
      cfg["attack"] = sw_flags.to_json(threads);
      return run_sweep(cfg);
    }
    if (*replay_cmd) return run_replay(rp_manifest);
  } catch (const kf::validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
