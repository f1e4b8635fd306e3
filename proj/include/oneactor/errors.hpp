#pragma once

#include <stdexcept>
#include <string>

namespace oneactor {

/// Non-finite values, divergence, or any other numeric failure of a run.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unreadable or unwritable file; the message names the path.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape mismatches, unknown tokens and other caller mistakes are reported as
// std::invalid_argument.

} // namespace oneactor
