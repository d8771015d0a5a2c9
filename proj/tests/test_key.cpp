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

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <map>

#include "keyfort/key.hpp"

using namespace keyfort;

TEST_CASE("generate_key produces a bijection of the right length") {
  Key key = generate_key(7, 4, 3);
  CHECK(key.perm.size() == 48);
  auto sorted = key.perm;
  std::sort(sorted.begin(), sorted.end());
  for (uint32_t i = 0; i < 48; ++i) CHECK(sorted[i] == i);
  CHECK_NOTHROW(validate_key(key));
}

TEST_CASE("generate_key is deterministic in (seed, P, C)") {
  Key a = generate_key(123, 8, 3);
  Key b = generate_key(123, 8, 3);
  CHECK(a.perm == b.perm);
  Key c = generate_key(124, 8, 3);
  CHECK(a.perm != c.perm);
}

TEST_CASE("P=1 C=3 permutations are uniform over the 6 possibilities") {
  // brute-force frequency count over 6000 seeds, chi-square oracle
  std::map<std::vector<uint32_t>, int> counts;
  for (uint64_t seed = 0; seed < 6000; ++seed)
    ++counts[generate_key(seed, 1, 3).perm];
  REQUIRE(counts.size() == 6);
  double chi2 = 0.0;
  for (const auto& [perm, n] : counts) {
    CHECK(n > 850);
    CHECK(n < 1150);
    const double d = double(n) - 1000.0;
    chi2 += d * d / 1000.0;
  }
  CHECK(chi2 < 25.0);  // 0.01% tail of chi-square with 5 dof is 25.7
}

TEST_CASE("generate_key rejects sizes beyond the index type") {
  CHECK_THROWS_AS(generate_key(1, 0, 3), validation_error);
  CHECK_THROWS_AS(generate_key(1, 4, 0), validation_error);
  CHECK_THROWS_AS(generate_key(1, 1 << 16, 3), validation_error);
}

TEST_CASE("key JSON round trip is exact and carries a checksum") {
  Key key = generate_key(42, 4, 3);
  const auto j = key_to_json(key);
  CHECK(j.at("version") == 1);
  CHECK(j.at("block_size") == 4);
  CHECK(j.at("channels") == 3);
  CHECK(j.at("seed") == 42);
  CHECK(j.at("crc32") == key.checksum());
  Key back = key_from_json(j);
  CHECK(back.perm == key.perm);
  CHECK(back.seed == key.seed);
}

TEST_CASE("tampered key files are rejected") {
  Key key = generate_key(42, 2, 3);
  auto j = key_to_json(key);
  SECTION("perm corruption breaks the crc") {
    std::swap(j["perm"][0], j["perm"][1]);
    CHECK_THROWS_AS(key_from_json(j), validation_error);
  }
  SECTION("non-bijective perm") {
    j["perm"][0] = j["perm"][1];
    j["crc32"] = 0;  // even with a matching crc it must fail
    Key tampered = key;
    tampered.perm[0] = tampered.perm[1];
    j["crc32"] = tampered.checksum();
    CHECK_THROWS_AS(key_from_json(j), validation_error);
  }
  SECTION("wrong length") {
    j["perm"].erase(0);
    Key shorter = key;
    shorter.perm.erase(shorter.perm.begin());
    j["crc32"] = shorter.checksum();
    CHECK_THROWS_AS(key_from_json(j), validation_error);
  }
  SECTION("unsupported version") {
    j["version"] = 9;
    CHECK_THROWS_AS(key_from_json(j), validation_error);
  }
}

TEST_CASE("key file save/load round trip is byte-stable") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "keyfort_key_test";
  fs::create_directories(dir);
  const auto path = (dir / "k.json").string();
  Key key = generate_key(7, 4, 3);
  save_key(key, path);
  Key back = load_key(path);
  CHECK(back.perm == key.perm);
  const std::string text = key_to_canonical_text(key);
  save_key(back, path + ".2");
  std::ifstream a(path, std::ios::binary), b(path + ".2", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(sa == text);
  fs::remove_all(dir);
}

TEST_CASE("identity_key maps every position to itself") {
  Key key = identity_key(4, 3);
  for (uint32_t i = 0; i < key.perm.size(); ++i) CHECK(key.perm[i] == i);
}
