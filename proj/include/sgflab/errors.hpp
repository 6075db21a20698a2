#pragma once

#include <stdexcept>
#include <string>

namespace sgflab {

// Base of every error raised by the library. kind() is a stable identifier
// used in the CLI's error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SGFLAB_DEFINE_ERROR(Name, tag)                                 \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& msg) : Error(tag, msg) {}         \
  };

SGFLAB_DEFINE_ERROR(InvalidInput, "invalid_input")
SGFLAB_DEFINE_ERROR(ShapeMismatch, "shape_mismatch")
SGFLAB_DEFINE_ERROR(SingularDrift, "singular_drift")
SGFLAB_DEFINE_ERROR(InfeasibleSpec, "infeasible_spec")
SGFLAB_DEFINE_ERROR(InstabilityError, "instability")
SGFLAB_DEFINE_ERROR(StepSizeError, "step_size")
SGFLAB_DEFINE_ERROR(CovarianceError, "covariance")
SGFLAB_DEFINE_ERROR(InsufficientSamples, "insufficient_samples")
SGFLAB_DEFINE_ERROR(InsufficientSpread, "insufficient_spread")
SGFLAB_DEFINE_ERROR(ConfigError, "config")

#undef SGFLAB_DEFINE_ERROR

}  // namespace sgflab
