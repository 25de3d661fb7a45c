#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

/// Tensor shape disagreement between op inputs.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Bad configuration or bad argument value (CLI exit code 1).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or missing input data: datasets, arch files, checkpoints (CLI exit code 2).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& what, int line)
        : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}

    int line() const noexcept { return line_; }

private:
    int line_;
};

class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

}  // namespace cascade
