#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace aggsum {

// Base class for every error raised by the toolkit. The CLI maps the
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters or option combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (e.g. all positions masked).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Id outside of a table.
class IndexError : public Error {
 public:
  IndexError(const std::string& what, std::int64_t index) : Error(what), index_(index) {}
  std::int64_t index() const noexcept { return index_; }

 private:
  std::int64_t index_;
};

// Malformed or empty user data.
class InputError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model supports.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Extended id without an out-of-vocabulary entry.
class MappingError : public Error {
 public:
  using Error::Error;
};

// Unreadable, truncated or inconsistent checkpoint / vocabulary file.
class LoadError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace aggsum
