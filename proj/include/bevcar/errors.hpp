/* Copyright 2026 The bevcar Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef BEVCAR_ERRORS_HPP_
#define BEVCAR_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace bevcar {

// Inconsistent shapes, sizes or parameters detected before any computation.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Missing or malformed files on disk. The message always names the file.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Synthetic scene generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  explicit GenerationError(const std::string& what)
      : std::runtime_error(what) {}
};

// Checkpoint format or compatibility failures.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

// Training diverged (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace bevcar

#endif  // BEVCAR_ERRORS_HPP_
