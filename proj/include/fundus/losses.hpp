#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "fundus/autograd.hpp"
#include "fundus/ops.hpp"
#include "fundus/errors.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

inline constexpr double kProbabilityClamp = 1e-7;

/// Depth regression term: batch mean of the per-sample residual L2 norm,
/// with the pixel count taken inside the norm, i.e. mean_n sqrt(mean_p r^2).
/// A constant residual c gives |c|.
template <typename T>
Var l2_regression_loss(Tape<T>& tape, Var pred, const Tensor<T>& target) {
  const Tensor<T>& p = tape.value(pred);
  p.require_same_shape(target, "l2_regression_loss");
  if (p.rank() < 1 || p.size() == 0) throw ShapeError("l2_regression_loss: empty input");
  const std::size_t N = p.dim(0), M = p.size() / N;
  std::vector<T> norms(N);
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    T s{0};
    for (std::size_t i = 0; i < M; ++i) {
      const T r = p[n * M + i] - target[n * M + i];
      s += r * r;
    }
    norms[n] = std::sqrt(s / static_cast<T>(M));
    total += norms[n];
  }
  return tape.push("l2_regression_loss", Tensor<T>::scalar(total / static_cast<T>(N)), tape.requires_grad(pred),
                   [pred, target, N, M, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
                     const T g = t.grad_of(self)[0];
                     const Tensor<T>& p = t.value(pred);
                     Tensor<T>& d = t.grad_buffer(pred.id);
                     for (std::size_t n = 0; n < N; ++n) {
                       if (norms[n] == T{0}) continue;  // subgradient 0 at the minimum
                       const T k = g / (static_cast<T>(N) * static_cast<T>(M) * norms[n]);
                       for (std::size_t i = 0; i < M; ++i) d[n * M + i] += k * (p[n * M + i] - target[n * M + i]);
                     }
                   });
}

/// Segmentation term: mean absolute deviation over every element.
template <typename T>
Var l1_loss(Tape<T>& tape, Var pred, const Tensor<T>& target) {
  const Tensor<T>& p = tape.value(pred);
  p.require_same_shape(target, "l1_loss");
  if (p.size() == 0) throw ShapeError("l1_loss: empty input");
  T s{0};
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - target[i]);
  const T count = static_cast<T>(p.size());
  return tape.push("l1_loss", Tensor<T>::scalar(s / count), tape.requires_grad(pred), [pred, target, count](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0] / count;
    const Tensor<T>& p = t.value(pred);
    Tensor<T>& d = t.grad_buffer(pred.id);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T r = p[i] - target[i];
      d[i] += r > T{0} ? g : (r < T{0} ? -g : T{0});
    }
  });
}

/// Mean of log(q) over all elements, q = p or 1 - p, with q clamped to
/// [eps, 1 - eps]. Clamped elements pass no gradient.
template <typename T>
Var mean_log(Tape<T>& tape, Var prob, bool complement, double eps = kProbabilityClamp) {
  const Tensor<T>& p = tape.value(prob);
  if (p.size() == 0) throw ShapeError("mean_log: empty input");
  const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
  T s{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= T{0} && p[i] <= T{1})) throw NumericalError("mean_log: probability outside [0,1]");
    const T q = complement ? T{1} - p[i] : p[i];
    s += std::log(std::clamp(q, lo, hi));
  }
  const T count = static_cast<T>(p.size());
  return tape.push("mean_log", Tensor<T>::scalar(s / count), tape.requires_grad(prob), [prob, complement, lo, hi, count](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0] / count;
    const Tensor<T>& p = t.value(prob);
    Tensor<T>& d = t.grad_buffer(prob.id);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T q = complement ? T{1} - p[i] : p[i];
      if (q < lo || q > hi) continue;
      d[i] += complement ? -g / q : g / q;
    }
  });
}

enum class GeneratorLossForm { NonSaturating, Minimax };

struct GanLosses {
  double d_loss = 0.0;
  double g_adv_loss = 0.0;
};

/// Scalar form of the adversarial losses for discriminator outputs on a real
/// map and on a generated one. d_loss = -[log d_real + log(1 - d_fake)].
/// Generator: -log d_fake (non-saturating) or log(1 - d_fake) (minimax).
inline GanLosses gan_losses(double d_real, double d_fake, GeneratorLossForm form = GeneratorLossForm::NonSaturating,
                            double eps = kProbabilityClamp) {
  if (!(d_real >= 0.0 && d_real <= 1.0 && d_fake >= 0.0 && d_fake <= 1.0))
    throw NumericalError("gan_losses: discriminator outputs must lie in [0,1]");
  const double r = std::clamp(d_real, eps, 1.0 - eps);
  const double f = std::clamp(d_fake, eps, 1.0 - eps);
  GanLosses out;
  out.d_loss = -(std::log(r) + std::log1p(-f));
  out.g_adv_loss = form == GeneratorLossForm::NonSaturating ? -std::log(f) : std::log1p(-f);
  return out;
}

/// adversarial ? adv + lambda * reg : reg
inline double generator_objective(double adv, double reg, double lambda, bool adversarial) {
  if (lambda < 0.0) throw ConfigError("generator_objective: lambda must be >= 0");
  return adversarial ? adv + lambda * reg : reg;
}

/// Tape form of generator_objective.
template <typename T>
Var generator_objective(Tape<T>& tape, Var adv, Var reg, double lambda, bool adversarial) {
  if (lambda < 0.0) throw ConfigError("generator_objective: lambda must be >= 0");
  return adversarial ? axpby(tape, adv, 1.0, reg, lambda) : reg;
}

/// Discriminator loss over a batch: -(mean log p_real + mean log(1 - p_fake)).
template <typename T>
Var discriminator_loss(Tape<T>& tape, Var p_real, Var p_fake) {
  return axpby(tape, mean_log(tape, p_real, false), -1.0, mean_log(tape, p_fake, true), -1.0);
}

template <typename T>
Var generator_adversarial_loss(Tape<T>& tape, Var p_fake, GeneratorLossForm form) {
  if (form == GeneratorLossForm::NonSaturating) return scale(tape, mean_log(tape, p_fake, false), -1.0);
  return mean_log(tape, p_fake, true);
}

}  // namespace fundus
