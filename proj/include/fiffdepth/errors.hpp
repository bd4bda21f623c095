// fiffdepth/errors.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace fiffdepth {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Timestep, weight or other scalar argument outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Input carries no usable signal (constant depth, empty mask, constant
/// prediction during alignment).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : "config key '" + key + "': " + what),
        key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Stored content digest does not match the payload (truncation, corruption).
class DigestError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

/// Non-finite loss during optimization.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::string last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const std::string& last_good_checkpoint() const noexcept { return last_good_; }

 private:
  std::string last_good_;
};

}  // namespace fiffdepth
