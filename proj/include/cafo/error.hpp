#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cafo {

enum class ErrorCode {
  MagicMismatch,
  VersionUnsupported,
  TruncatedFile,
  TrailingData,
  NonFiniteValue,
  IoFailure,
  ZeroRow,
  LabelOutOfRange,
  EmptyClass,
  ShapeMismatch,
  MissingClass,
  AffinityOutOfRange,
  NonFiniteLoss,
  InsufficientCandidates,
  NotEnoughSamples,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Validation errors are caller mistakes (bad flags, bad shapes); the CLI maps
// them to a distinct exit code.
bool is_validation_error(ErrorCode code);

}  // namespace cafo
