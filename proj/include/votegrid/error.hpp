// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace votegrid {

enum class ErrorKind {
  InvalidArgument,    // bad parameter value (non-positive radius, lambda < 0, ...)
  InvalidConfig,      // malformed config file / CLI usage
  InsufficientPoints, // fewer points than an operation requires
  RequiresOrganized,  // operation needs a grid-organized cloud
  DegenerateInput,    // collinear RANSAC sample, empty neighborhood, ...
  EmptyResult,        // operation produced nothing where something is required
  ShapeMismatch,      // dimension / channel disagreement
  ParseError,         // malformed file content
  IoError,            // missing or unreadable file
  StateError,         // missing forward trace and similar misuse
  UndefinedMetric,    // metric not defined for the given labels
  TrainingDiverged,   // loss exceeded the divergence bound
  InvalidSpec,        // inconsistent synthetic generation spec
  EmptyBank,          // memory bank built from no rows
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// Process exit code for the CLI: 2 config, 3 data, 4 numeric/training.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::InvalidArgument:
      case ErrorKind::InvalidConfig:
      case ErrorKind::InvalidSpec:
        return 2;
      case ErrorKind::ParseError:
      case ErrorKind::IoError:
      case ErrorKind::InsufficientPoints:
      case ErrorKind::RequiresOrganized:
      case ErrorKind::ShapeMismatch:
      case ErrorKind::EmptyBank:
      case ErrorKind::EmptyResult:
        return 3;
      case ErrorKind::DegenerateInput:
      case ErrorKind::StateError:
      case ErrorKind::UndefinedMetric:
      case ErrorKind::TrainingDiverged:
        return 4;
    }
    return 1;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace votegrid
