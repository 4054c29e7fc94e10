#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pvb {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NotSquare,
  NotPositiveDefinite,
  RankDeficient,
  ZeroMatrix,
  SafetyRegionViolation,
  TapeMismatch,
  DimensionTooLarge,
  NonFiniteLoss,
  EmptyDataset,
  ParseError,
  DimMismatch,
  LabelOutOfRange,
  BadMagic,
  VersionUnsupported,
  ChecksumMismatch,
  TruncatedFile,
  Io,
};

std::string_view error_code_name(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pvb
