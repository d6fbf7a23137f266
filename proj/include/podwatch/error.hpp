#pragma once

#include <stdexcept>
#include <string>

namespace podwatch {

/// Root of every exception thrown by the library. `kind()` is a stable
/// machine-readable tag (e.g. "InvalidTriple", "ExceptionResponse").
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define PODWATCH_DEFINE_ERROR(Name)                              \
  class Name : public ::podwatch::Error {                        \
   public:                                                       \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

}  // namespace podwatch
