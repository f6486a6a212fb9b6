#pragma once

#include <stdexcept>
#include <string>

namespace mmlab {

// Exit codes used by the command line tool.
enum class ExitCode : int {
  Ok = 0,
  Config = 1,
  Data = 2,
  Numeric = 3,
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual ExitCode exit_code() const noexcept { return ExitCode::Data; }
};

// Operand dimensions do not fit together.
struct ShapeError : Error {
  using Error::Error;
};

// Two parameter sets are not homologous.
struct StructureError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::Config; }
};

// Bad labels or bad dataset contents.
struct DataError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::Numeric; }
};

struct IoError : Error {
  using Error::Error;
};

// Checkpoint decoding failures; each is distinguishable by type.
struct BadMagicError : IoError {
  using IoError::IoError;
};
struct VersionMismatchError : IoError {
  using IoError::IoError;
};
struct TruncatedError : IoError {
  using IoError::IoError;
};

}  // namespace mmlab
