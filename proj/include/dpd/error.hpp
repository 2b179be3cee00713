#pragma once

#include <stdexcept>
#include <string>

namespace dpd {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid user configuration: unknown names, values out of range.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Scene generator could not place the requested heads.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// A statistical estimator was handed an unusable sample.
class SamplingError : public Error {
public:
    using Error::Error;
};

/// A metric was requested on an input for which it is not defined.
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error {
public:
    using Error::Error;
};

/// Refusal to resume a run whose stored configuration differs.
class ResumeError : public Error {
public:
    using Error::Error;
};

}  // namespace dpd
