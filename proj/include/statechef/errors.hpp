#pragma once

#include <stdexcept>
#include <string>

namespace statechef {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or invariant-violating input (files, manifests, specs, arguments).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Lookup of an entity that does not exist.
class NotFoundError : public DataError {
 public:
  using DataError::DataError;
};

/// Optimistic-concurrency failure; the caller may reload and retry.
class ConflictError : public Error {
 public:
  ConflictError(const std::string& what, long long current_version)
      : Error(what), current_version_(current_version) {}

  long long current_version() const noexcept { return current_version_; }

 private:
  long long current_version_;
};

}  // namespace statechef
