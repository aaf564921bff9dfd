#ifndef DIFFMM_ERRORS_HPP_
#define DIFFMM_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace diffmm {

/// Malformed or inconsistent input data (files, ids, shapes of user data).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf or divergence detected inside a numerical routine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace diffmm

#endif  // DIFFMM_ERRORS_HPP_
