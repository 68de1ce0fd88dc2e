#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mixlab/errors.hpp"

namespace mixlab {

enum class MaskDirection { forward, reverse, none };

inline std::string to_string(MaskDirection d) {
  switch (d) {
    case MaskDirection::forward: return "forward";
    case MaskDirection::reverse: return "reverse";
    case MaskDirection::none: return "none";
  }
  return "?";
}

// Token-mixing mask over an (out positions x in positions) weight matrix.
// forward: output i may read inputs j <= i (lower triangular);
// reverse: j >= i (the transpose); none: every entry open.
struct CausalMask {
  MaskDirection direction = MaskDirection::forward;

  bool allows(std::size_t out, std::size_t in) const {
    switch (direction) {
      case MaskDirection::forward: return in <= out;
      case MaskDirection::reverse: return in >= out;
      case MaskDirection::none: return true;
    }
    return false;
  }

  // Row-major rows x cols 0/1 pattern.
  template <class T>
  std::vector<T> pattern(std::size_t rows, std::size_t cols) const {
    std::vector<T> m(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m[i * cols + j] = allows(i, j) ? T(1) : T(0);
    return m;
  }
};

}  // namespace mixlab
