#ifndef XFORMER_ERRORS_HPP
#define XFORMER_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace xformer {

/// Input that violates a precondition: singular lattice, bad species,
/// shape mismatch, malformed record.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced or consumed by a numerical routine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xformer

#endif  // XFORMER_ERRORS_HPP
