// Copyright 2026 The pka-engine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "doctest.h"
#include "pka/verify.hpp"

using namespace pka;

TEST_CASE("equivalence suite: a short run passes and reports its size") {
  const auto r = run_equivalence(20, 3);
  CHECK(r.instances == 20);
  CHECK(r.passed());
  CHECK(to_json(r).at("passed") == true);
}

TEST_CASE("gradcheck suite: every kernel is covered") {
  const auto r = run_gradcheck(2, 5);
  CHECK(r.entries.size() == 7);
  for (const auto& e : r.entries) {
    INFO(e.name << " " << e.worst_rel_error);
    CHECK(e.instances == 2);
    CHECK(e.worst_rel_error <= r.tolerance);
  }
}

TEST_CASE("fallback check: exhaustive masks keep every row non-empty") {
  const auto r = run_fallback_check();
  CHECK(r.masks_checked == 2 * (16 + 512 + 1024));
  CHECK(r.empty_rows == 0);
  CHECK(r.fallback_triggered);
}
