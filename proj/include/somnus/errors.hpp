#pragma once

#include <stdexcept>
#include <string>

namespace somnus {

// Error taxonomy shared by every module. The CLI maps ConfigError to exit
// code 1 and DataError to exit code 2; the rest indicate caller bugs.

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace somnus
