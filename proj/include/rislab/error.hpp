// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rislab {

// Exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kValidation = 2,
  kNumerical = 3,
  kProvenance = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode code() const noexcept { return ExitCode::kFailure; }
};

// Malformed input, broken invariants, impossible requests.
class ValidationError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kValidation; }
};

// Singular systems, non-finite losses or gradients.
class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kNumerical; }
};

// Upstream artifact does not match the hash recorded downstream.
class ProvenanceError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kProvenance; }
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rislab
