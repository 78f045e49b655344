#pragma once

#include <stdexcept>
#include <string>

namespace encforge {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kInput = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::kConfig) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input error: " + what, ExitCode::kInput) {}
  InputError(const std::string& prefix, const std::string& what) : Error(prefix + what, ExitCode::kInput) {}
};

// Shape disagreement between operands.
class DimensionError : public InputError {
 public:
  explicit DimensionError(const std::string& what) : InputError("dimension error: ", what) {}
};

// Malformed cu_seqlens or packed batch layout.
class BatchError : public InputError {
 public:
  explicit BatchError(const std::string& what) : InputError("batch error: ", what) {}
};

class CheckpointError : public InputError {
 public:
  explicit CheckpointError(const std::string& what) : InputError("checkpoint error: ", what) {}
};

class EmptyLossError : public InputError {
 public:
  explicit EmptyLossError(const std::string& what) : InputError("empty loss: ", what) {}
};

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error("capacity error: " + what, ExitCode::kConfig) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what, ExitCode::kNumeric) {}
};

}  // namespace encforge
