#pragma once

#include <stdexcept>
#include <string>

namespace gbaf {

/// Shape disagreement between tensor operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A call violated an operation precondition (bad round index, non-scalar
/// loss, batch of one in training mode, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file (trajectory, config, checkpoint).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint magic/version/checksum problems.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A fading gain fell below the usable floor; the episode must be aborted.
class DegenerateGainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace gbaf
