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

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/crc32.hpp"
#include "keyfort/errors.hpp"
#include "keyfort/rng.hpp"

namespace keyfort {

// Secret key of the block-wise shuffle: block size P, channel count C and an
// explicit permutation of the C*P*P flattened block positions. The file
// stores the permutation itself (not just the seed) so keys survive PRNG
// revisions; the seed is provenance metadata only.
struct Key {
  int version = 1;
  int block_size = 0;   // P
  int channels = 0;     // C
  std::optional<uint64_t> seed;
  std::vector<uint32_t> perm;

  size_t block_len() const { return perm.size(); }

  // CRC-32 over the little-endian 32-bit encoding of perm.
  uint32_t checksum() const {
    uint32_t crc = 0;
    for (uint32_t p : perm) {
      uint8_t le[4] = {uint8_t(p), uint8_t(p >> 8), uint8_t(p >> 16),
                       uint8_t(p >> 24)};
      crc = crc32_update(crc, le, 4);
    }
    return crc;
  }
};

inline void validate_key(const Key& key) {
  if (key.version != 1)
    throw validation_error("key: unsupported version " +
                           std::to_string(key.version));
  if (key.block_size < 1 || key.channels < 1)
    throw validation_error("key: block_size and channels must be >= 1");
  const uint64_t expect = uint64_t(key.channels) * uint64_t(key.block_size) *
                          uint64_t(key.block_size);
  if (key.perm.size() != expect)
    throw validation_error("key: perm length " +
                           std::to_string(key.perm.size()) + " != C*P*P = " +
                           std::to_string(expect));
  // bijection check: each index 0..n-1 appears exactly once
  std::vector<bool> seen(key.perm.size(), false);
  for (uint32_t p : key.perm) {
    if (p >= key.perm.size() || seen[p])
      throw validation_error("key: perm is not a permutation of 0..n-1");
    seen[p] = true;
  }
}

// Permutation drawn by Fisher-Yates over SplitMix64 with unbiased bounded
// draws; deterministic in (seed, P, C).
inline Key generate_key(uint64_t seed, int block_size, int channels) {
  if (block_size < 1 || channels < 1)
    throw validation_error("generate_key: block_size and channels must be >= 1");
  const uint64_t n =
      uint64_t(channels) * uint64_t(block_size) * uint64_t(block_size);
  if (n > uint64_t(UINT32_MAX))
    throw validation_error("generate_key: C*P*P = " + std::to_string(n) +
                           " exceeds the 32-bit index type");
  Key key;
  key.block_size = block_size;
  key.channels = channels;
  key.seed = seed;
  key.perm.resize(size_t(n));
  for (size_t i = 0; i < key.perm.size(); ++i) key.perm[i] = uint32_t(i);
  SplitMix64 rng(seed);
  rng.shuffle(key.perm);
  return key;
}

inline Key identity_key(int block_size, int channels) {
  Key key;
  key.block_size = block_size;
  key.channels = channels;
  key.perm.resize(size_t(channels) * size_t(block_size) * size_t(block_size));
  for (size_t i = 0; i < key.perm.size(); ++i) key.perm[i] = uint32_t(i);
  return key;
}

inline nlohmann::json key_to_json(const Key& key) {
  nlohmann::json j;
  j["version"] = key.version;
  j["block_size"] = key.block_size;
  j["channels"] = key.channels;
  if (key.seed) j["seed"] = *key.seed;
  j["perm"] = key.perm;
  j["crc32"] = key.checksum();
  return j;
}

inline Key key_from_json(const nlohmann::json& j) {
  Key key;
  try {
    key.version = j.at("version").get<int>();
    key.block_size = j.at("block_size").get<int>();
    key.channels = j.at("channels").get<int>();
    if (j.contains("seed")) key.seed = j.at("seed").get<uint64_t>();
    key.perm = j.at("perm").get<std::vector<uint32_t>>();
    const uint32_t crc = j.at("crc32").get<uint32_t>();
    if (crc != key.checksum())
      throw validation_error("key: crc32 mismatch (file corrupt?)");
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("key: malformed JSON: ") + e.what());
  }
  validate_key(key);
  return key;
}

// Canonical on-disk form: compact JSON, sorted keys, trailing newline.
inline std::string key_to_canonical_text(const Key& key) {
  return key_to_json(key).dump() + "\n";
}

inline void save_key(const Key& key, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("key: cannot open for write: " + path);
  out << key_to_canonical_text(key);
}

inline Key load_key(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("key: cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("key: unparsable JSON in " + path + ": " + e.what());
  }
  return key_from_json(j);
}

}  // namespace keyfort
