#pragma once

#include <stdexcept>
#include <string>

namespace pilno {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid arguments / malformed config or input files. The CLI maps these to exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

// Tensor shape mismatch in an operation.
struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// A NaN or Inf appeared; carries the name of the first offending operation.
struct NonFiniteError : Error {
    std::string op;
    explicit NonFiniteError(std::string op_name)
        : Error("non-finite value produced by op '" + op_name + "'"), op(std::move(op_name)) {}
};

} // namespace pilno
