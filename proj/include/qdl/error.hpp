#pragma once

#include <stdexcept>
#include <string>

namespace qdl {

// Base for every failure raised by the library. Callers that only need a
// diagnostic can catch this; tests match on the derived type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace qdl
