#pragma once

#include <stdexcept>
#include <string>

namespace attrloc {

// Shapes or extents that do not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN / Inf where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk input (CSV, checkpoint, config).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid synthetic dataset description.
struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace attrloc
