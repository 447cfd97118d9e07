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

// Write-once store of per-layer condition keys, values and branch outputs.

#include <cstddef>
#include <map>
#include <string>
#include <utility>

#include "pka/errors.hpp"
#include "pka/layout.hpp"
#include "pka/tensor.hpp"

namespace pka {

template <typename T>
class ConditionCache {
 public:
  struct Entry {
    BasicTensor<T> k;
    BasicTensor<T> v;
    BasicTensor<T> output;
  };
  using Key = std::pair<std::size_t, std::string>;  // (layer, condition segment name)

  bool populated() const noexcept { return populated_; }
  int creation_step() const noexcept { return step_; }

  void populate(int step, std::map<Key, Entry> entries) {
    if (populated_) {
      throw StateError("condition cache already populated at step " + std::to_string(step_));
    }
    entries_ = std::move(entries);
    step_ = step;
    populated_ = true;
    bytes_ = 0;
    for (const auto& [_, e] : entries_) bytes_ += (e.k.size() + e.v.size()) * sizeof(T);
  }

  const Entry& lookup(std::size_t layer, const std::string& condition) const {
    if (!populated_) throw StateError("condition cache read before population");
    auto it = entries_.find({layer, condition});
    if (it == entries_.end()) {
      throw CacheMissError("no cache entry for layer " + std::to_string(layer) +
                           ", condition '" + condition + "'");
    }
    ++lookups_;
    return it->second;
  }

  bool contains(std::size_t layer, const std::string& condition) const {
    return entries_.count({layer, condition}) != 0;
  }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t lookups() const noexcept { return lookups_; }
  // Bytes held in K and V, tallied when the entries were stored.
  std::size_t memory_bytes() const noexcept { return bytes_; }

  // Closed form: sum over layers and conditions of 2 n d h bytes.
  static std::size_t expected_bytes(const ModalityLayout& layout, std::size_t layers,
                                    std::size_t width) {
    std::size_t tokens = 0;
    for (const auto& s : layout.segments()) {
      if (s.is_condition()) tokens += s.length;
    }
    return layers * 2 * tokens * width * sizeof(T);
  }

 private:
  std::map<Key, Entry> entries_;
  bool populated_ = false;
  int step_ = -1;
  std::size_t bytes_ = 0;
  mutable std::size_t lookups_ = 0;
};

}  // namespace pka
