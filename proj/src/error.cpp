#include "cafo/error.hpp"

namespace cafo {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MagicMismatch: return "MagicMismatch";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::TrailingData: return "TrailingData";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ZeroRow: return "ZeroRow";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingClass: return "MissingClass";
    case ErrorCode::AffinityOutOfRange: return "AffinityOutOfRange";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InsufficientCandidates: return "InsufficientCandidates";
    case ErrorCode::NotEnoughSamples: return "NotEnoughSamples";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch:
    case ErrorCode::MissingClass:
    case ErrorCode::LabelOutOfRange:
    case ErrorCode::EmptyClass:
    case ErrorCode::InsufficientCandidates:
    case ErrorCode::NotEnoughSamples:
    case ErrorCode::InvalidArgument:
      return true;
    default:
      return false;
  }
}

}  // namespace cafo
