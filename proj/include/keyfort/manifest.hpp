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

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/errors.hpp"

namespace keyfort {

// ---- SHA-1 (for git-blob-style content hashes in manifests) ----
class Sha1 {
 public:
  Sha1() { reset(); }

  void reset() {
    h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
    len_ = 0;
    buf_fill_ = 0;
  }

  void update(const void* data, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    len_ += n;
    while (n > 0) {
      const size_t take = std::min(n, size_t(64) - buf_fill_);
      std::memcpy(buf_.data() + buf_fill_, p, take);
      buf_fill_ += take;
      p += take;
      n -= take;
      if (buf_fill_ == 64) {
        process(buf_.data());
        buf_fill_ = 0;
      }
    }
  }

  std::string hex_digest() {
    const uint64_t bits = len_ * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    const uint8_t zero = 0;
    while (buf_fill_ != 56) update(&zero, 1);
    // length is excluded from len_ bookkeeping by construction of the above
    uint8_t lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = uint8_t(bits >> (56 - 8 * i));
    std::memcpy(buf_.data() + 56, lenb, 8);
    process(buf_.data());
    static const char* hexd = "0123456789abcdef";
    std::string out;
    for (uint32_t w : h_)
      for (int i = 28; i >= 0; i -= 4) out += hexd[(w >> i) & 0xF];
    return out;
  }

 private:
  static uint32_t rol(uint32_t v, int s) { return (v << s) | (v >> (32 - s)); }

  void process(const uint8_t* block) {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (uint32_t(block[4 * i]) << 24) |
             (uint32_t(block[4 * i + 1]) << 16) |
             (uint32_t(block[4 * i + 2]) << 8) | uint32_t(block[4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const uint32_t tmp = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<uint32_t, 5> h_{};
  std::array<uint8_t, 64> buf_{};
  uint64_t len_ = 0;
  size_t buf_fill_ = 0;
};

// Hash of file contents with git blob semantics:
// sha1("blob <size>\0" + bytes).
inline std::string git_blob_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw validation_error("hash: cannot open " + path);
  const auto size = size_t(in.tellg());
  in.seekg(0);
  Sha1 h;
  const std::string prefix = "blob " + std::to_string(size) + '\0';
  h.update(prefix.data(), prefix.size());
  std::vector<char> chunk(1 << 16);
  size_t left = size;
  while (left > 0) {
    const size_t take = std::min(left, chunk.size());
    in.read(chunk.data(), std::streamsize(take));
    if (!in) throw std::runtime_error("hash: read failed on " + path);
    h.update(chunk.data(), take);
    left -= take;
  }
  return h.hex_digest();
}

inline constexpr const char* kToolVersion = "keyfort 1.0.0";

// Audit record written atomically next to every CLI output; the resolved
// config plus seeds plus input hashes are sufficient to replay the run.
struct RunManifest {
  std::string command;
  nlohmann::json resolved_config;
  std::vector<uint64_t> seeds;
  std::vector<std::string> input_paths;
  std::vector<std::string> output_paths;
  double wall_seconds = 0.0;
  bool reproducible = true;

  nlohmann::json to_json() const {
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& p : input_paths)
      inputs.push_back({{"path", p}, {"blob_sha1", git_blob_hash(p)}});
    return nlohmann::json{{"tool", kToolVersion},
                          {"command", command},
                          {"config", resolved_config},
                          {"seeds", seeds},
                          {"inputs", inputs},
                          {"outputs", output_paths},
                          {"wall_seconds", reproducible ? 0.0 : wall_seconds},
                          {"reproducible", reproducible}};
  }
};

// Atomic write: temp file in the same directory, then rename.
inline void write_text_atomic(const std::string& path,
                              const std::string& text) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw validation_error("cannot open for write: " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_manifest(const RunManifest& m, const std::string& path) {
  write_text_atomic(path, m.to_json().dump(2) + "\n");
}

}  // namespace keyfort
