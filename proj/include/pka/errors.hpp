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

#include <stdexcept>
#include <string>
#include <string_view>

namespace pka {

// Every failure raised by the library derives from Error and carries a stable
// kind string that the CLI copies into its structured error output.
class Error : public std::runtime_error {
 public:
  Error(std::string_view kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  std::string_view kind() const noexcept { return kind_; }

 private:
  std::string_view kind_;
};

#define PKA_DEFINE_ERROR(Name, kind_str)                                    \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(kind_str, what) {}       \
  }

// Caller broke a documented precondition (shape mismatch, empty softmax row).
PKA_DEFINE_ERROR(ContractViolation, "contract_violation");
PKA_DEFINE_ERROR(ParameterError, "parameter_error");
PKA_DEFINE_ERROR(DomainError, "domain_error");
// Spatial condition grid does not match the image grid.
PKA_DEFINE_ERROR(AlignmentError, "alignment_error");
PKA_DEFINE_ERROR(DegenerateMaskError, "degenerate_mask");
PKA_DEFINE_ERROR(UnsupportedOpError, "unsupported_op");
PKA_DEFINE_ERROR(CacheMissError, "cache_miss");
PKA_DEFINE_ERROR(StateError, "state_error");
// Instrumented counters disagree with the closed-form cost model.
PKA_DEFINE_ERROR(AccountingError, "accounting_error");
PKA_DEFINE_ERROR(ValidationError, "validation_error");
PKA_DEFINE_ERROR(TrainingError, "training_error");
PKA_DEFINE_ERROR(FormatError, "format_error");

#undef PKA_DEFINE_ERROR

}  // namespace pka
