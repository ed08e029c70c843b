#pragma once

#include <stdexcept>
#include <string>

namespace josa {

// Error classes map onto distinct CLI exit codes (see cli.hpp).
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ShapeMismatchError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IdMismatchError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TooFewSamplesError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PathMissingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace josa
