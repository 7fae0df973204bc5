#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fieldreg {

/// Malformed or truncated file content, bad magic, mismatched shapes on load.
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Breakdown inside a numerical routine (solver failure, non-finite values).
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Cholesky pivot failure; carries the index of the offending pivot.
struct not_positive_definite : numerical_error {
  explicit not_positive_definite(std::size_t i)
      : numerical_error("matrix not positive definite at pivot " + std::to_string(i)),
        index(i) {}
  std::size_t index;
};

/// API misuse that config validation cannot catch (for example reusing a spent tape).
struct invalid_state : std::logic_error {
  using std::logic_error::logic_error;
};

/// Rejected run configuration.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fieldreg
