#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace atlas_match {

enum class ErrorCode {
  MalformedHeader,
  TruncatedPayload,
  UnsupportedMaxval,
  IoFailure,
  TileLargerThanImage,
  SingularTransform,
  InvalidArgument,
  ShapeMismatch,
  NonFiniteActivation,
  NoForwardState,
  VersionMismatch,
  ArchitectureMismatch,
  CorruptPayload,
  UnsupportedInputSize,
  LengthMismatch,
  NoValidTriplets,
  IndexEmpty,
  EmptyTestSet,
  DimensionMismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedMaxval: return "UnsupportedMaxval";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::TileLargerThanImage: return "TileLargerThanImage";
    case ErrorCode::SingularTransform: return "SingularTransform";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NoForwardState: return "NoForwardState";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::UnsupportedInputSize: return "UnsupportedInputSize";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NoValidTriplets: return "NoValidTriplets";
    case ErrorCode::IndexEmpty: return "IndexEmpty";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
  }
  return "Unknown";
}

// Every failure in the library is reported as an Error carrying a stable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace atlas_match
