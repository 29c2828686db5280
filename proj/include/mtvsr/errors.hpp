#pragma once

#include <stdexcept>
#include <string>

namespace mtvsr {

// Base class for runtime failures raised by the library. Precondition
// violations on arguments use std::invalid_argument instead.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Unreadable / unwritable files, malformed headers, unsupported datatypes.
class IoError : public Error {
public:
    using Error::Error;
};

// Hyper-parameter estimation could not produce a usable value.
class EstimationError : public Error {
public:
    using Error::Error;
};

// Non-finite iterates or a broken linear operator inside a solver.
class SolverError : public Error {
public:
    using Error::Error;
};

} // namespace mtvsr
