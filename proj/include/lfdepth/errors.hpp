#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lfd {

/// Stable machine-readable error categories. The CLI maps them onto exit codes.
enum class ErrorCode {
  Shape,
  Domain,
  Usage,
  Config,
  Io,
  Format,
  Evaluation,
  NumericalCheck,
};

const char* error_code_name(ErrorCode code);

/// Process exit code for an error category: 1 usage/config, 2 IO/format, 3 numerical.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorCode::Shape, m) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& m) : Error(ErrorCode::Domain, m) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error(ErrorCode::Usage, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorCode::Config, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorCode::Io, m) {}
};

/// Malformed file content. Carries the offending file and byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& file, std::uint64_t offset, const std::string& m)
      : Error(ErrorCode::Format, file + " @ byte " + std::to_string(offset) + ": " + m),
        file_(file),
        offset_(offset) {}
  const std::string& file() const noexcept { return file_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::uint64_t offset_;
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& m) : Error(ErrorCode::Evaluation, m) {}
};

class NumericalCheckError : public Error {
 public:
  explicit NumericalCheckError(const std::string& m) : Error(ErrorCode::NumericalCheck, m) {}
};

}  // namespace lfd
