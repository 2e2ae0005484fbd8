#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "fundus/autograd.hpp"
#include "fundus/errors.hpp"

namespace fundus {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Epsilon is added to sqrt of the bias-corrected second
/// moment: p -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  /// One update of every parameter from its gradient. Moment buffers are
  /// created on the first call and bound to the parameter order given.
  void step(const std::vector<Parameter<T>*>& params) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T ib1 = static_cast<T>(1.0 - cfg_.beta1), ib2 = static_cast<T>(1.0 - cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.epsilon);
    const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter<T>& p = *params[k];
      if (p.value.shape() != m_[k].shape() || p.grad.shape() != p.value.shape())
        throw ShapeError("adam: shape mismatch for parameter " + std::to_string(k));
      T* m = m_[k].ptr();
      T* v = v_[k].ptr();
      const T* g = p.grad.ptr();
      T* w = p.value.ptr();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        m[i] = b1 * m[i] + ib1 * g[i];
        v[i] = b2 * v[i] + ib2 * g[i] * g[i];
        const T mh = m[i] * c1;
        const T vh = v[i] * c2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
      if (!p.value.all_finite()) throw NumericalError("adam: non-finite parameter after update");
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace fundus
