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

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/model.hpp"

namespace keyfort {

// Checkpoint container layout (all integers little-endian):
//   bytes 0..7   uint64 header length H
//   bytes 8..8+H UTF-8 JSON header
//   remainder    raw float32 tensor payloads, at header-declared offsets
//                relative to the start of the payload region (byte 8+H)
// Header fields: format, version, config, mode, merged, lora {rank, alpha}
// (lora mode only), key (optional), norm_mean, norm_std, tensors
// [{name, shape, offset, nbytes}].
//
// Payload floats are written in the model's canonical parameter order with
// no padding, so a fixed model state always serializes to identical bytes.

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

inline constexpr const char* kCheckpointFormat = "keyfort-checkpoint";

inline void save_model(const VitModel& m, const std::string& path) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = 1;
  header["config"] = config_to_json(m.cfg);
  header["mode"] = to_string(m.mode);
  header["merged"] = m.lora_merged;
  if (m.mode == FinetuneMode::lora) {
    const auto& a = *m.patch_embed.lora;
    header["lora"] = {{"rank", a.rank}, {"alpha", a.alpha}};
  }
  if (m.key)
    header["key"] = key_to_json(*m.key);
  else
    header["key"] = nullptr;
  header["norm_mean"] = m.norm_mean;
  header["norm_std"] = m.norm_std;

  auto params = m.params();
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const Param* p : params) {
    const uint64_t nbytes = uint64_t(p->t.numel()) * 4;
    tensors.push_back({{"name", p->name},
                       {"shape", p->t.shape},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = tensors;

  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("checkpoint: cannot open for write: " + path);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const Param* p : params)
    out.write(reinterpret_cast<const char*>(p->t.data()),
              std::streamsize(p->t.numel() * 4));
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline VitModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("checkpoint: cannot open: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen == 0 || hlen > (64u << 20))
    throw validation_error("checkpoint: bad header length in " + path);
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (!in) throw validation_error("checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("checkpoint: unparsable header: " +
                           std::string(e.what()));
  }
  if (header.value("format", "") != kCheckpointFormat)
    throw validation_error("checkpoint: not a " +
                           std::string(kCheckpointFormat) + " file: " + path);

  VitModel m;
  m.init(config_from_json(header.at("config")), /*seed=*/0);
  const auto mode = finetune_mode_from_string(header.at("mode").get<std::string>());
  if (mode == FinetuneMode::lora) {
    const auto& lj = header.at("lora");
    attach_lora(m, lj.at("rank").get<int>(), lj.at("alpha").get<float>(),
                /*seed=*/0);
  } else {
    m.mode = mode;
  }
  m.lora_merged = header.value("merged", false);
  if (!header.at("key").is_null()) m.key = key_from_json(header.at("key"));
  m.set_normalization(header.at("norm_mean").get<std::vector<float>>(),
                      header.at("norm_std").get<std::vector<float>>());

  auto params = m.params();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size())
    throw validation_error("checkpoint: tensor count mismatch (file " +
                           std::to_string(tensors.size()) + ", model " +
                           std::to_string(params.size()) + ")");
  const std::streampos payload = std::streampos(8 + hlen);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& tj = tensors[i];
    if (tj.at("name").get<std::string>() != params[i]->name)
      throw validation_error("checkpoint: tensor order mismatch at " +
                             params[i]->name);
    const auto shape = tj.at("shape").get<std::vector<int>>();
    if (shape != params[i]->t.shape)
      throw validation_error("checkpoint: shape mismatch for " +
                             params[i]->name);
    in.seekg(payload + std::streampos(tj.at("offset").get<uint64_t>()));
    in.read(reinterpret_cast<char*>(params[i]->t.data()),
            std::streamsize(params[i]->t.numel() * 4));
    if (!in)
      throw validation_error("checkpoint: truncated payload at " +
                             params[i]->name);
  }
  return m;
}

}  // namespace keyfort
