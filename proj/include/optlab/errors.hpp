#pragma once

#include <stdexcept>
#include <string>

namespace optlab {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class LengthError : public std::length_error {
public:
    using std::length_error::length_error;
};

// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TreeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// No healthy checkpoint is left to restart from.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// An external collaborator (classifier process or endpoint) is unreachable.
class DependencyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace optlab
