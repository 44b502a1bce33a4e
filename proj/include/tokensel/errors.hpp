// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tokensel {

// Base class for all library errors. Subtypes map onto the CLI exit-code
// contract (see tools/): config/spec -> 1, I/O or integrity -> 2,
// numeric failure -> 3.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape or axis mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Retention budget or per-row k outside its legal range.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// Non-finite or otherwise malformed numeric input.
class InputError : public Error {
 public:
  using Error::Error;
};

// Elementwise math outside the operation's domain (e.g. log of x <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid synthetic-task specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File read/write failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or dataset failed its checksum / magic / version check.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Backbone pretraining did not reach the required validation accuracy.
class PretrainError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokensel
