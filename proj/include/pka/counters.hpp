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
#include <map>
#include <string>
#include <utility>

namespace pka {

// Instrumented tallies filled in by the attention kernels. Blocks are keyed
// by (query segment, key segment) names; pairs are summed over heads.
class CostCounters {
 public:
  struct Block {
    std::size_t pairs = 0;
    std::size_t calls = 0;
  };

  void record(const std::string& query, const std::string& key,
              std::size_t pairs, std::size_t allocated_entries) {
    auto& b = blocks_[{query, key}];
    b.pairs += pairs;
    ++b.calls;
    note_allocation(allocated_entries);
  }

  // Largest single score buffer handed out by any kernel.
  void note_allocation(std::size_t entries) {
    if (entries > peak_entries_) peak_entries_ = entries;
    allocated_entries_ += entries;
  }

  const std::map<std::pair<std::string, std::string>, Block>& blocks() const {
    return blocks_;
  }
  std::size_t peak_entries() const noexcept { return peak_entries_; }
  std::size_t allocated_entries() const noexcept { return allocated_entries_; }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& [_, b] : blocks_) n += b.pairs;
    return n;
  }

  void clear() { *this = CostCounters{}; }

 private:
  std::map<std::pair<std::string, std::string>, Block> blocks_;
  std::size_t peak_entries_ = 0;
  std::size_t allocated_entries_ = 0;
};

}  // namespace pka
