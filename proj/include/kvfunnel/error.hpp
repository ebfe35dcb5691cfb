#pragma once

#include <stdexcept>
#include <string>

namespace kvfunnel {

// Error taxonomy shared by every module. Callers that only care about
// "something went wrong" can catch kvfunnel::Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid hyperparameter or argument value.
class ParameterError : public Error {
public:
    using Error::Error;
};

// Invalid external input (token ids, files).
class InputError : public Error {
public:
    using Error::Error;
};

// Object state incompatible with the requested operation.
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace kvfunnel
