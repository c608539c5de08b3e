// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module.

#pragma once

#include <stdexcept>
#include <string>

namespace saeinterp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or vector dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside its documented domain (k = 0, unknown prefix, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Input data is missing, empty, or inconsistent with the configuration.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not match its binary or text format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, missing credentials, or rejected authentication.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradients during optimisation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A required template segment was not found in a token sequence.
class TemplateMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace saeinterp
