#pragma once

#include <stdexcept>
#include <string>

namespace crois {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// All per-example weights in a batch were zero.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class SingularRowError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// A group required by the operation has no members.
class EmptyGroupError : public Error {
 public:
  EmptyGroupError(const std::string& what, int group) : Error(what), group_(group) {}
  int group() const noexcept { return group_; }

 private:
  int group_;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace crois
