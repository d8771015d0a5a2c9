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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyfort/errors.hpp"
#include "keyfort/image.hpp"
#include "keyfort/rng.hpp"

namespace keyfort {

// Labeled image collection. Pixels stay in their 8-bit source form and are
// scaled to [0,1] on access; attacks and budgets are defined on that scale.
struct Dataset {
  std::string split;
  int channels = 0, height = 0, width = 0;
  int num_classes = 0;
  std::vector<uint8_t> pixels;  // n * C*H*W
  std::vector<int> labels;

  size_t size() const { return labels.size(); }
  size_t image_bytes() const { return size_t(channels) * height * width; }

  void image_into(size_t i, ImageTensor& out) const {
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.data.resize(image_bytes());
    const uint8_t* src = pixels.data() + i * image_bytes();
    for (size_t k = 0; k < out.data.size(); ++k)
      out.data[k] = float(src[k]) * (1.0f / 255.0f);
  }

  ImageTensor image(size_t i) const {
    ImageTensor out;
    image_into(i, out);
    return out;
  }

  int label(size_t i) const { return labels[i]; }
};

// Per-channel standardization statistics; computed from the train split
// only and carried with checkpoints.
struct DataStats {
  std::vector<float> mean, stddev;
};

inline DataStats compute_stats(const Dataset& train) {
  DataStats s;
  const int C = train.channels;
  const size_t plane = size_t(train.height) * train.width;
  std::vector<double> sum(size_t(C), 0.0), sum2(size_t(C), 0.0);
  for (size_t i = 0; i < train.size(); ++i) {
    const uint8_t* img = train.pixels.data() + i * train.image_bytes();
    for (int c = 0; c < C; ++c) {
      const uint8_t* p = img + size_t(c) * plane;
      for (size_t k = 0; k < plane; ++k) {
        const double v = double(p[k]) / 255.0;
        sum[size_t(c)] += v;
        sum2[size_t(c)] += v * v;
      }
    }
  }
  const double n = double(train.size()) * double(plane);
  for (int c = 0; c < C; ++c) {
    const double m = sum[size_t(c)] / n;
    const double var = sum2[size_t(c)] / n - m * m;
    s.mean.push_back(float(m));
    s.stddev.push_back(float(std::sqrt(std::max(var, 1e-12))));
  }
  return s;
}

inline void save_stats(const DataStats& s, const std::string& path) {
  nlohmann::json j{{"mean", s.mean}, {"std", s.stddev}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("stats: cannot open for write: " + path);
  out << j.dump() << "\n";
}

inline DataStats load_stats(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("stats: cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
    return DataStats{j.at("mean").get<std::vector<float>>(),
                     j.at("std").get<std::vector<float>>()};
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("stats: malformed JSON in " + path + ": " +
                           e.what());
  }
}

// Random subset without replacement (seeded Fisher-Yates), keeping order of
// the drawn indices.
inline Dataset take_subset(const Dataset& ds, size_t n, uint64_t seed) {
  if (n == 0 || n >= ds.size()) return ds;
  std::vector<uint32_t> idx(ds.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = uint32_t(i);
  SplitMix64 rng(seed);
  rng.shuffle(idx);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  Dataset out;
  out.split = ds.split;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.pixels.reserve(n * ds.image_bytes());
  out.labels.reserve(n);
  for (uint32_t i : idx) {
    const uint8_t* src = ds.pixels.data() + size_t(i) * ds.image_bytes();
    out.pixels.insert(out.pixels.end(), src, src + ds.image_bytes());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// ---- CIFAR-10 binary batches ----
// Each file is 10000 records of <1 byte label><3072 bytes pixel> with the
// pixel block channel-major 32x32 R, G, B.

inline constexpr int kCifarDim = 32;
inline constexpr int kCifarChannels = 3;
inline constexpr int kCifarClasses = 10;
inline constexpr size_t kCifarRecord = 1 + 3072;
inline constexpr size_t kCifarPerBatch = 10000;

inline void read_cifar_batch(const std::string& path, Dataset& ds) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw validation_error("cifar10: missing batch file: " + path);
  const auto fsize = size_t(in.tellg());
  if (fsize != kCifarRecord * kCifarPerBatch)
    throw validation_error("cifar10: " + path + " has " +
                           std::to_string(fsize) + " bytes, expected " +
                           std::to_string(kCifarRecord * kCifarPerBatch));
  in.seekg(0);
  std::vector<uint8_t> rec(kCifarRecord);
  for (size_t i = 0; i < kCifarPerBatch; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), std::streamsize(rec.size()));
    if (!in) throw validation_error("cifar10: truncated read in " + path);
    if (rec[0] >= kCifarClasses)
      throw validation_error("cifar10: label " + std::to_string(rec[0]) +
                             " out of range in " + path);
    ds.labels.push_back(rec[0]);
    ds.pixels.insert(ds.pixels.end(), rec.begin() + 1, rec.end());
  }
}

inline Dataset load_cifar10_split(const std::string& dir, bool train) {
  Dataset ds;
  ds.split = train ? "train" : "test";
  ds.channels = kCifarChannels;
  ds.height = kCifarDim;
  ds.width = kCifarDim;
  ds.num_classes = kCifarClasses;
  namespace fs = std::filesystem;
  if (train) {
    for (int b = 1; b <= 5; ++b)
      read_cifar_batch(
          (fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin"))
              .string(),
          ds);
  } else {
    read_cifar_batch((fs::path(dir) / "test_batch.bin").string(), ds);
  }
  return ds;
}

struct DatasetPair {
  Dataset train, test;
};

inline DatasetPair load_cifar10(const std::string& dir) {
  return {load_cifar10_split(dir, true), load_cifar10_split(dir, false)};
}

// Writes records in the same binary layout (used by the transform CLI and
// the corpus tooling). Caller supplies exactly kCifarPerBatch records per
// file via repeated calls.
inline void write_cifar_batch(const std::string& path, const Dataset& ds,
                              size_t begin, size_t count) {
  if (ds.channels != kCifarChannels || ds.height != kCifarDim ||
      ds.width != kCifarDim)
    throw validation_error("cifar10 writer: dataset is not 3x32x32");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("cifar10 writer: cannot open " + path);
  for (size_t i = begin; i < begin + count; ++i) {
    const uint8_t label = uint8_t(ds.labels[i]);
    out.write(reinterpret_cast<const char*>(&label), 1);
    out.write(
        reinterpret_cast<const char*>(ds.pixels.data() + i * ds.image_bytes()),
        std::streamsize(ds.image_bytes()));
  }
  if (!out) throw std::runtime_error("cifar10 writer: write failed: " + path);
}

// ---- IDX (big-endian) image/label pairs ----

namespace detail {
inline uint32_t read_be32(std::istream& in, const std::string& path) {
  uint8_t b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw validation_error("idx: truncated header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}
}  // namespace detail

inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path,
                        const std::string& split = "train") {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw validation_error("idx: cannot open " + images_path);
  if (detail::read_be32(imgs, images_path) != 0x00000803u)
    throw validation_error("idx: bad image magic in " + images_path);
  const uint32_t n = detail::read_be32(imgs, images_path);
  const uint32_t h = detail::read_be32(imgs, images_path);
  const uint32_t w = detail::read_be32(imgs, images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw validation_error("idx: cannot open " + labels_path);
  if (detail::read_be32(labs, labels_path) != 0x00000801u)
    throw validation_error("idx: bad label magic in " + labels_path);
  const uint32_t nl = detail::read_be32(labs, labels_path);
  if (nl != n)
    throw validation_error("idx: image/label count mismatch (" +
                           std::to_string(n) + " vs " + std::to_string(nl) +
                           ")");

  Dataset ds;
  ds.split = split;
  ds.channels = 1;
  ds.height = int(h);
  ds.width = int(w);
  ds.pixels.resize(size_t(n) * h * w);
  imgs.read(reinterpret_cast<char*>(ds.pixels.data()),
            std::streamsize(ds.pixels.size()));
  if (!imgs) throw validation_error("idx: truncated pixel data in " + images_path);
  std::vector<uint8_t> raw(n);
  labs.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n));
  if (!labs) throw validation_error("idx: truncated labels in " + labels_path);
  int max_label = 0;
  for (uint8_t l : raw) {
    ds.labels.push_back(l);
    max_label = std::max(max_label, int(l));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path) {
  if (ds.channels != 1)
    throw validation_error("idx writer: only single-channel datasets");
  auto write_be32 = [](std::ostream& out, uint32_t v) {
    const uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8),
                          uint8_t(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  std::ofstream imgs(images_path, std::ios::binary | std::ios::trunc);
  if (!imgs) throw validation_error("idx writer: cannot open " + images_path);
  write_be32(imgs, 0x00000803u);
  write_be32(imgs, uint32_t(ds.size()));
  write_be32(imgs, uint32_t(ds.height));
  write_be32(imgs, uint32_t(ds.width));
  imgs.write(reinterpret_cast<const char*>(ds.pixels.data()),
             std::streamsize(ds.pixels.size()));
  std::ofstream labs(labels_path, std::ios::binary | std::ios::trunc);
  if (!labs) throw validation_error("idx writer: cannot open " + labels_path);
  write_be32(labs, 0x00000801u);
  write_be32(labs, uint32_t(ds.size()));
  for (int l : ds.labels) {
    const uint8_t b = uint8_t(l);
    labs.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!imgs || !labs) throw std::runtime_error("idx writer: write failed");
}

// ---- PPM (P6) / PGM (P5), 8-bit, maxval 255 ----

inline void export_ppm(const ImageTensor& x, const std::string& path) {
  if (x.channels != 1 && x.channels != 3)
    throw validation_error("ppm: only 1- or 3-channel images supported");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("ppm: cannot open for write: " + path);
  out << (x.channels == 3 ? "P6" : "P5") << "\n"
      << x.width << " " << x.height << "\n255\n";
  // interleave channels per pixel (PPM order), quantizing to 8 bits
  for (int y = 0; y < x.height; ++y)
    for (int px = 0; px < x.width; ++px)
      for (int c = 0; c < x.channels; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, x.at(c, y, px)));
        const uint8_t q = uint8_t(std::lround(v * 255.0f));
        out.write(reinterpret_cast<const char*>(&q), 1);
      }
  if (!out) throw std::runtime_error("ppm: write failed: " + path);
}

namespace detail {
inline int read_pnm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = 0;
  if (!(in >> value)) throw validation_error("ppm: malformed header in " + path);
  return value;
}
}  // namespace detail

inline ImageTensor import_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("ppm: cannot open: " + path);
  std::string magic;
  in >> magic;
  int channels = 0;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw validation_error("ppm: unsupported magic '" + magic + "' in " + path);
  const int w = detail::read_pnm_token(in, path);
  const int h = detail::read_pnm_token(in, path);
  const int maxval = detail::read_pnm_token(in, path);
  if (maxval != 255)
    throw validation_error("ppm: maxval " + std::to_string(maxval) +
                           " unsupported (need 255) in " + path);
  in.get();  // single whitespace after maxval
  std::vector<uint8_t> raw(size_t(channels) * h * w);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (!in) throw validation_error("ppm: truncated payload in " + path);
  ImageTensor x(channels, h, w);
  size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int px = 0; px < w; ++px)
      for (int c = 0; c < channels; ++c)
        x.at(c, y, px) = float(raw[k++]) * (1.0f / 255.0f);
  return x;
}

}  // namespace keyfort
