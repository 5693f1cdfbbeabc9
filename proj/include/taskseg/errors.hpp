// Copyright 2026 The TaskSeg Authors. All Rights Reserved.
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

namespace taskseg {

/// Base class for all taskseg errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor/array extent mismatch. Message lists the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid domain data (labels, class tables, task ground truths).
struct ValidationError : Error {
  using Error::Error;
};

/// Fixed-capacity container overflow (e.g. more targets than text slots).
struct CapacityError : Error {
  CapacityError(const std::string& msg, long overflow_count)
      : Error(msg), overflow(overflow_count) {}
  long overflow;
};

/// Non-finite values or out-of-domain scalar arguments.
struct NumericError : Error {
  using Error::Error;
};

/// Filesystem failures (missing paths, unreadable/unwritable files).
struct IoError : Error {
  using Error::Error;
};

/// Malformed on-disk payloads (bad magic, unknown version, bad records).
struct FormatError : Error {
  using Error::Error;
};

/// Bad or inconsistent configuration values.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace taskseg
