#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sfiqa {

enum class ErrorKind {
  kInvalidArgument,
  kDomain,
  kShape,
  kMissingDomain,
  kAlreadyExists,
  kUninitializedStatistics,
  kTraceMismatch,
  kState,
  kConfig,
  kData,
  kSplit,
  kCrop,
  kFit,
  kMetric,
  kIo,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; the kind selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace sfiqa
