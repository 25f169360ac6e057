#pragma once

#include <stdexcept>
#include <string>

namespace xres {

// Shape or extent disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid layer/model configuration (groups, heads, k, channel splits).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN / Inf where a finite value is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed NSRT stream.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad content in otherwise well-formed data (unmapped class, label out of range).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace xres
