#pragma once

#include <stdexcept>
#include <string>

namespace deepedit {

enum class ErrorKind {
  kShapeMismatch,
  kInvalidArgument,
  kOutOfBounds,
  kFormat,
  kConfig,
  kNotFound,
  kNonFinite,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace deepedit
