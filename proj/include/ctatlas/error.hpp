#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctatlas {

enum class ErrorCode {
  Format,
  UnsupportedShape,
  IO,
  UnsupportedOrientation,
  Shape,
  Validation,
  InsufficientExtent,
  EmptyCrop,
  NoOverlap,
  DegenerateFit,
  Config,
  Graph,
  SingularTransform,
  NonInvertibleField,
  EmptyInput,
  InsufficientCohort,
  UndefinedDistance,
  DegenerateSample,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Format: return "format error";
    case ErrorCode::UnsupportedShape: return "unsupported shape";
    case ErrorCode::IO: return "I/O error";
    case ErrorCode::UnsupportedOrientation: return "unsupported orientation";
    case ErrorCode::Shape: return "shape error";
    case ErrorCode::Validation: return "validation error";
    case ErrorCode::InsufficientExtent: return "insufficient extent";
    case ErrorCode::EmptyCrop: return "empty crop";
    case ErrorCode::NoOverlap: return "no overlap";
    case ErrorCode::DegenerateFit: return "degenerate fit";
    case ErrorCode::Config: return "config error";
    case ErrorCode::Graph: return "graph error";
    case ErrorCode::SingularTransform: return "singular transform";
    case ErrorCode::NonInvertibleField: return "non-invertible field";
    case ErrorCode::EmptyInput: return "empty input";
    case ErrorCode::InsufficientCohort: return "insufficient cohort";
    case ErrorCode::UndefinedDistance: return "undefined distance";
    case ErrorCode::DegenerateSample: return "degenerate sample";
  }
  return "unknown error";
}

// Single exception type for the toolkit; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ctatlas
