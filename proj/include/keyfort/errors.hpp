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

#include <stdexcept>
#include <string>

namespace keyfort {

// Bad user input: malformed keys/configs, shape mismatches, missing files.
// The CLI maps this to exit code 1; everything else escaping to main is a
// runtime failure and maps to exit code 2.
class validation_error : public std::runtime_error {
 public:
  explicit validation_error(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace keyfort
