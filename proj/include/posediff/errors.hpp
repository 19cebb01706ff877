// Copyright 2026 The posediff Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace posediff {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError/UsageError -> 1, FormatError/DataError -> 2, NumericError -> 3.

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Rendering rejected a pose (point behind the camera); callers resample.
struct RenderRejected : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace posediff
