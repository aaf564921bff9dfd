#ifndef DIFFMM_NN_TENSOR_HPP_
#define DIFFMM_NN_TENSOR_HPP_

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "diffmm/errors.hpp"
#include "diffmm/rng.hpp"

namespace diffmm::nn {

using Index = Eigen::Index;

/// Dense row-major matrix; rows are sequence positions, columns features.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}
template <typename Derived>
std::string shape_of(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

/// Throws NumericalError naming `where` if any entry is NaN or infinite.
template <typename Derived>
void check_finite(const Eigen::DenseBase<Derived>& m, std::string_view where) {
  if (!m.allFinite()) {
    throw NumericalError("non-finite values in " + std::string(where));
  }
}

/// A learnable tensor with its gradient buffer and Adam moments.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  Matrix<T> m;
  Matrix<T> v;
  std::int64_t step = 0;

  Index size() const { return value.size(); }
};

/**
 * Owns every Parameter of a model under a stable name. References returned by
 * add() stay valid for the lifetime of the set; iteration follows insertion
 * order, which is also the checkpoint order.
 */
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter<T>& add(const std::string& name, Index rows, Index cols) {
    if (index_.contains(name)) {
      throw std::invalid_argument("duplicate parameter name " + name);
    }
    auto& p = params_.emplace_back();
    p.name = name;
    p.value = Matrix<T>::Zero(rows, cols);
    p.grad = Matrix<T>::Zero(rows, cols);
    p.m = Matrix<T>::Zero(rows, cols);
    p.v = Matrix<T>::Zero(rows, cols);
    index_.emplace(name, &p);
    return p;
  }

  Parameter<T>* find(std::string_view name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  const Parameter<T>* find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t size() const { return params_.size(); }
  Index element_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, Parameter<T>*, std::less<>> index_;
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void init_xavier(Parameter<T>& p, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  std::uniform_real_distribution<double> u(-a, a);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(u(rng));
}

template <typename T>
void init_constant(Parameter<T>& p, T value) {
  p.value.setConstant(value);
}

/// Xavier for every parameter under `prefix` except biases and norm gains.
template <typename T>
void init_default(ParameterSet<T>& params, std::string_view prefix, Rng& rng) {
  for (auto& p : params) {
    std::string_view name = p.name;
    if (!name.starts_with(prefix)) continue;
    if (name.ends_with(".bias") || name.ends_with(".gain")) continue;
    init_xavier(p, rng);
  }
}

}  // namespace diffmm::nn

#endif  // DIFFMM_NN_TENSOR_HPP_
