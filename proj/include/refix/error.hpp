/**
 * Copyright 2026 The ReFix Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace refix {

// Every failure raised by the engine derives from Error. The C API maps each
// subclass onto one status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition (non-scalar loss, parameter out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed tensor file or manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable input data, class underflow, IO failures.
class DataError : public Error {
 public:
  using Error::Error;
};

// Unknown or malformed configuration key/value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace refix
