#ifndef XFORMER_SPECIAL_FUNCTIONS_HPP
#define XFORMER_SPECIAL_FUNCTIONS_HPP

#include <cmath>
#include <numbers>

#include "errors.hpp"

namespace xformer {

/// Upper incomplete gamma Γ(3/2, x) = √x·e^{−x} + (√π/2)·erfc(√x).
inline double incomplete_gamma_3half(double x) {
  if (!(x >= 0.0)) throw ValidationError("incomplete_gamma_3half: x must be non-negative");
  const double r = std::sqrt(x);
  return r * std::exp(-x) + 0.5 * std::sqrt(std::numbers::pi) * std::erfc(r);
}

}  // namespace xformer

#endif  // XFORMER_SPECIAL_FUNCTIONS_HPP
