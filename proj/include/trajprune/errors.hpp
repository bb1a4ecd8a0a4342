#pragma once

#include <stdexcept>
#include <string>

namespace trajprune {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid arguments, ranges, shapes, unknown presets. CLI exit code 2.
struct ParamError : Error {
    using Error::Error;
};

// Score curve has no usable threshold crossing. CLI exit code 3.
struct DegenerateCurveError : Error {
    using Error::Error;
};

// More than one contiguous above-threshold region. CLI exit code 3.
struct AmbiguousCrossingError : DegenerateCurveError {
    using DegenerateCurveError::DegenerateCurveError;
};

// Requested aggregate sparsity cannot be met under the per-stage cap.
struct InfeasibleError : ParamError {
    using ParamError::ParamError;
};

// Non-finite training loss. CLI exit code 4.
struct TrainingError : Error {
    using Error::Error;
};

// Linear-algebra failure (singular damped Hessian etc.). CLI exit code 5.
struct NumericalError : Error {
    using Error::Error;
};

// Non-finite activations during Hessian capture; message names the layer.
struct CaptureError : NumericalError {
    using NumericalError::NumericalError;
};

}  // namespace trajprune
