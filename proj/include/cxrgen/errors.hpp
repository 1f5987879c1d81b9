#pragma once

#include <stdexcept>
#include <string>

namespace cxrgen {

// Common base so callers can catch everything raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform (elementwise, matmul, concat, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Input outside the mathematical domain of a primitive (log of <= 0, ...).
struct DomainError : Error {
    using Error::Error;
};

// A documented precondition of an operation was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Optimizer / training-loop failure (non-finite gradients, ...).
struct TrainingError : Error {
    using Error::Error;
};

// On-disk artifact is malformed: bad magic, version, checksum, truncation.
struct FormatError : Error {
    using Error::Error;
};

// Checkpoint content does not fit the receiving model (missing tensor,
// shape mismatch).
struct LoadError : Error {
    using Error::Error;
};

// Command-line misuse; the CLI maps this to exit code 2.
struct UsageError : Error {
    using Error::Error;
};

}  // namespace cxrgen
