#pragma once

#include <stdexcept>
#include <string>

namespace dosekit {

enum class ErrorKind {
  InvalidGeometry,
  Bounds,
  Unit,
  Config,
  Normalization,
  CropInfeasible,
  EmptyMask,
  NegativeDose,
  Numerical,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidGeometry: return "invalid-geometry";
    case ErrorKind::Bounds: return "bounds";
    case ErrorKind::Unit: return "unit";
    case ErrorKind::Config: return "config";
    case ErrorKind::Normalization: return "normalization";
    case ErrorKind::CropInfeasible: return "crop-infeasible";
    case ErrorKind::EmptyMask: return "empty-mask";
    case ErrorKind::NegativeDose: return "negative-dose";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace dosekit
