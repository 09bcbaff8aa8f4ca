// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace caspr {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag; `exit_code()` is what the CLI returns for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
  virtual int exit_code() const noexcept { return 1; }
};

#define CASPR_DEFINE_ERROR(Name, Code)                         \
  class Name : public Error {                                  \
   public:                                                     \
    using Error::Error;                                        \
    const char* kind() const noexcept override { return #Name; } \
    int exit_code() const noexcept override { return Code; }   \
  };

CASPR_DEFINE_ERROR(SchemaMismatch, 3)
CASPR_DEFINE_ERROR(NumericError, 4)
CASPR_DEFINE_ERROR(IoError, 5)
CASPR_DEFINE_ERROR(EmptyDataset, 1)
CASPR_DEFINE_ERROR(ShapeMismatch, 1)
CASPR_DEFINE_ERROR(ContractViolation, 1)
CASPR_DEFINE_ERROR(ConfigError, 1)
CASPR_DEFINE_ERROR(LabelError, 1)
CASPR_DEFINE_ERROR(CaseError, 1)
CASPR_DEFINE_ERROR(EmptyEntity, 1)
CASPR_DEFINE_ERROR(BadMagic, 5)
CASPR_DEFINE_ERROR(VersionMismatch, 5)
CASPR_DEFINE_ERROR(TruncatedFile, 5)

#undef CASPR_DEFINE_ERROR

/// Malformed input record. `row()` is the zero-based data row index
/// (header excluded), or npos when the failure is not tied to a row.
class ParseError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  ParseError(const std::string& what, std::size_t row = npos)
      : Error(row == npos ? what : "row " + std::to_string(row) + ": " + what), row_(row) {}

  const char* kind() const noexcept override { return "ParseError"; }
  int exit_code() const noexcept override { return 2; }
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

}  // namespace caspr
