#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mnmef {

enum class ErrorKind {
  kNotSPD,
  kEigFailure,
  kDimMismatch,
  kShapeMismatch,
  kNonFinite,
  kIndexOutOfRange,
  kNotScalar,
  kDegenerateTruth,
  kDivideByZero,
  kAllDiverged,
  kDivergence,
  kEmptyLocalObs,
  kPrecondition,
  kConfig,
  kData,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNotSPD: return "NotSPD";
    case ErrorKind::kEigFailure: return "EigFailure";
    case ErrorKind::kDimMismatch: return "DimMismatch";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kNonFinite: return "NonFinite";
    case ErrorKind::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::kNotScalar: return "NotScalar";
    case ErrorKind::kDegenerateTruth: return "DegenerateTruth";
    case ErrorKind::kDivideByZero: return "DivideByZero";
    case ErrorKind::kAllDiverged: return "AllDiverged";
    case ErrorKind::kDivergence: return "Divergence";
    case ErrorKind::kEmptyLocalObs: return "EmptyLocalObs";
    case ErrorKind::kPrecondition: return "Precondition";
    case ErrorKind::kConfig: return "Config";
    case ErrorKind::kData: return "Data";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind so the
/// CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace mnmef
