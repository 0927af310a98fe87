#pragma once

#include <stdexcept>
#include <string>

namespace jea {

// Base for every error raised by the library. Subclasses name the failure
// category so callers (and tests) can dispatch on it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PlanError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class MigrationError : public Error {
 public:
  using Error::Error;
};

class HarnessError : public Error {
 public:
  using Error::Error;
};

class ProbeError : public Error {
 public:
  using Error::Error;
};

}  // namespace jea
