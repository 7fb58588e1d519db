// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace vlmim {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller-provided data violating an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Parameter sets whose names or shapes disagree.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A loss component evaluated to NaN or infinity.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(std::string component, double value)
      : Error("non-finite loss component '" + component + "': " + std::to_string(value)),
        component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

/// Checkpoint container problems (bad magic, version, or config hash).
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace vlmim
