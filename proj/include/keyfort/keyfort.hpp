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

#include "keyfort/attacks.hpp"
#include "keyfort/checkpoint.hpp"
#include "keyfort/crc32.hpp"
#include "keyfort/dataset.hpp"
#include "keyfort/errors.hpp"
#include "keyfort/evalharness.hpp"
#include "keyfort/gradcheck.hpp"
#include "keyfort/image.hpp"
#include "keyfort/key.hpp"
#include "keyfort/layers.hpp"
#include "keyfort/manifest.hpp"
#include "keyfort/model.hpp"
#include "keyfort/parallel.hpp"
#include "keyfort/report.hpp"
#include "keyfort/rng.hpp"
#include "keyfort/tensor.hpp"
#include "keyfort/trainer.hpp"
#include "keyfort/transform.hpp"
