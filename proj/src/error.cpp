#include "ecer/error.hpp"

namespace ecer {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kZeroVector: return "zero-vector";
    case ErrorCode::kProviderUnavailable: return "provider-unavailable";
    case ErrorCode::kMalformedResponse: return "malformed-response";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kMissingFile: return "missing-file";
    case ErrorCode::kDuplicateImageId: return "duplicate-image-id";
    case ErrorCode::kMissingCaption: return "missing-caption-for-image";
    case ErrorCode::kMissingImage: return "missing-image";
    case ErrorCode::kOverlappingSplits: return "overlapping-splits";
    case ErrorCode::kUnknownClass: return "unknown-class-in-split";
    case ErrorCode::kInsufficientClasses: return "insufficient-classes";
    case ErrorCode::kInsufficientImages: return "insufficient-images";
    case ErrorCode::kMissingEntities: return "missing-entities-for-class";
    case ErrorCode::kMissingPrerequisite: return "missing-prerequisite";
    case ErrorCode::kConfig: return "bad-config";
    case ErrorCode::kIo: return "io-failure";
  }
  return "unknown";
}

}  // namespace ecer
