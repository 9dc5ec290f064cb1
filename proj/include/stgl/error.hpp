#pragma once

#include <stdexcept>
#include <string>

namespace stgl {

// Bad argument or violated precondition.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// File that cannot be parsed or was written in an incompatible format.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training diverged or a pipeline stage could not complete.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace stgl
