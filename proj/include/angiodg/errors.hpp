#pragma once

#include <stdexcept>
#include <string>

namespace angiodg {

// Mismatched or degenerate tensor / mask dimensions.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Bad configuration, empty inputs, or out-of-order pipeline phases. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values or training divergence. CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A relative change was requested against a zero baseline score.
class UndefinedBaselineError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class InvalidScheduleError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class InvalidWeightError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Missing or unreadable files while loading a dataset directory.
class IngestionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace angiodg
