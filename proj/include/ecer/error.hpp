#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ecer {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kZeroVector,
  kProviderUnavailable,
  kMalformedResponse,
  kDimensionMismatch,
  kMissingFile,
  kDuplicateImageId,
  kMissingCaption,
  kMissingImage,
  kOverlappingSplits,
  kUnknownClass,
  kInsufficientClasses,
  kInsufficientImages,
  kMissingEntities,
  kMissingPrerequisite,
  kConfig,
  kIo,
};

std::string_view error_code_name(ErrorCode code);

/// Exception type used throughout the library. The code drives CLI exit
/// status mapping; the message is meant for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Error produced when an LLM returns text that cannot be parsed into a
/// candidate list. Carries the raw model output.
class MalformedResponseError : public Error {
 public:
  MalformedResponseError(const std::string& message, std::string raw)
      : Error(ErrorCode::kMalformedResponse, message), raw_(std::move(raw)) {}

  const std::string& raw_text() const noexcept { return raw_; }

 private:
  std::string raw_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
  if (!cond) throw Error(code, message);
}

}  // namespace ecer
