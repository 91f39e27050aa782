#pragma once

#include <stdexcept>
#include <string>

namespace conpure {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor, image or mask dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or precondition on user input.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Optimization produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace conpure
