#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flsim {

/// Invalid dimensions, out-of-range hyperparameters, impossible partitions.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config text rejected by the parser. Carries the offending key path and
/// the 1-based line number (0 when the error is not tied to a line).
class ParseError : public ConfigError {
 public:
  ParseError(std::string key, std::size_t line, const std::string& message)
      : ConfigError(line > 0 ? "line " + std::to_string(line) + ": " + key + ": " + message
                             : (key.empty() ? message : key + ": " + message)),
        key_(std::move(key)),
        line_(line) {}

  const std::string& key() const noexcept { return key_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

/// Two parameter vectors with different layouts were combined.
class LayoutError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite loss or gradient. `block()` names the parameter block (or
/// "loss") where the first non-finite value was found.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string block, const std::string& message)
      : std::runtime_error(message), block_(std::move(block)) {}

  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flsim
