#pragma once

#include <stdexcept>
#include <string>

namespace segcvae {

/// Base class for every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class DegenerateVector : public Error {
 public:
  using Error::Error;
};

class EmptyCorpus : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, long batch_id) : Error(what), batch_id_(batch_id) {}
  long batch_id() const { return batch_id_; }

 private:
  long batch_id_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingKey : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Bad value for a known key; the message carries the line number.
class TypeError : public ConfigError {
 public:
  TypeError(const std::string& what, int line) : ConfigError(what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace segcvae
