#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace retro {

// Every failure the library raises carries one of these categories; the CLI
// maps each category to its own exit code.
enum class ErrorKind {
  Config,
  MissingFile,
  Parse,
  Schema,
  Model,
  Numeric,
  Verify,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class MissingFile : public Error {
 public:
  explicit MissingFile(const std::string& path)
      : Error(ErrorKind::MissingFile, "cannot open file: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorKind::Parse, "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& field, const std::string& what)
      : Error(ErrorKind::Schema, "line " + std::to_string(line) + ": field '" + field + "': " + what),
        line_(line),
        field_(field) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class UnknownToken : public Error {
 public:
  explicit UnknownToken(const std::string& token)
      : Error(ErrorKind::Model, "unknown token '" + token + "'"), token_(token) {}
  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

class ContextOverflow : public Error {
 public:
  ContextOverflow(std::size_t needed, std::size_t limit)
      : Error(ErrorKind::Model, "context of " + std::to_string(needed) + " positions exceeds limit " +
                                    std::to_string(limit)) {}
};

class LengthMismatch : public Error {
 public:
  LengthMismatch(std::size_t got, std::size_t want)
      : Error(ErrorKind::Model,
              "target length " + std::to_string(got) + " does not match soft length " + std::to_string(want)) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(ErrorKind::Model, what) {}
};

class NonFiniteGradient : public Error {
 public:
  NonFiniteGradient() : Error(ErrorKind::Numeric, "gradient contains NaN or Inf") {}
};

class DivergedTraining : public Error {
 public:
  explicit DivergedTraining(int epoch)
      : Error(ErrorKind::Numeric, "validation loss became non-finite at epoch " + std::to_string(epoch)) {}
};

class EmptyReference : public Error {
 public:
  EmptyReference() : Error(ErrorKind::Model, "metric called without a non-empty reference") {}
};

class VerifyMismatch : public Error {
 public:
  explicit VerifyMismatch(const std::string& what) : Error(ErrorKind::Verify, what) {}
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::MissingFile: return 3;
    case ErrorKind::Parse:
    case ErrorKind::Schema: return 4;
    case ErrorKind::Model: return 5;
    case ErrorKind::Numeric: return 6;
    case ErrorKind::Verify: return 7;
  }
  return 1;
}

}  // namespace retro
