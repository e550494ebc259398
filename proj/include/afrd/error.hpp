#pragma once

#include <stdexcept>
#include <string>

namespace afrd {

// Error types are precision independent and shared by both library variants.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or axis mismatch. `axis` names the offending dimension.
class DimensionError : public Error {
public:
    DimensionError(const std::string& op, const std::string& axis, const std::string& detail)
        : Error(op + ": dimension mismatch on " + axis + ": " + detail), axis_(axis) {}
    const std::string& axis() const noexcept { return axis_; }

private:
    std::string axis_;
};

class GraphError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint, image or index file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Dataset content or I/O problem; message names the path or sample.
class DataError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Metric undefined for the given input (e.g. AUROC with a single class).
class MetricError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace afrd
