#pragma once

#include <stdexcept>
#include <string>

namespace wotlab {

// Root of every error raised by the library. The CLI maps subclasses onto
// process exit codes (see tools/wotlab_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or batch shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Index outside a valid range (e.g. a class label >= class count).
class IndexError : public Error {
 public:
  using Error::Error;
};

// An object was used in a state that forbids the call (e.g. a consumed tape).
class StateError : public Error {
 public:
  using Error::Error;
};

// A caller-side precondition was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable dataset files.
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace wotlab
