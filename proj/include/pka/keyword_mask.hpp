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

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace pka {

enum class ScoreNormalization {
  // Softmax over the image-token axis (the default reading).
  kSoftmax,
  // Softmax score divided by its row maximum, i.e. exp(logit - max logit).
  // Makes a fixed threshold independent of the number of image tokens.
  kRelativeToMax,
};

std::string_view to_string(ScoreNormalization mode);
ScoreNormalization parse_score_normalization(std::string_view name);

// Binary activation over image tokens. Computed from the text-keyword affinity
// at denoising step `step`, consumed by the subject-condition block at
// step + 1.
struct KeywordMask {
  std::vector<std::uint8_t> active;
  int step = -1;
  double epsilon = 0.0;
  ScoreNormalization mode = ScoreNormalization::kSoftmax;
  // True when thresholding switched every token off and the all-active
  // fallback was substituted.
  bool fell_back = false;

  std::size_t size() const noexcept { return active.size(); }
  std::size_t active_count() const noexcept {
    std::size_t n = 0;
    for (auto a : active) n += a ? 1 : 0;
    return n;
  }

  static KeywordMask all_active(std::size_t n, int step = -1) {
    KeywordMask m;
    m.active.assign(n, 1);
    m.step = step;
    return m;
  }
};

}  // namespace pka
