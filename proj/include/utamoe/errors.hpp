#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace utamoe {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Operand extents do not fit the operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Mean/normalisation over an empty set (all-zero mask, no records, ...).
struct EmptyReductionError : std::domain_error {
  using std::domain_error::domain_error;
};

// Invalid or inconsistent configuration values; the CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition (non-scalar loss, missing grad, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN/Inf detected during training; the CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace utamoe
