#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fundus/autograd.hpp"
#include "fundus/errors.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;  // convolution input plane set
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// col[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*stride - pad + i][ox*stride - pad + j], zero outside.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * g.cols();
        const T* plane = x + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= W) ? T{0} : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatter-add columns back into the plane set.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * g.cols();
        T* plane = x + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* what) {
  const long num = static_cast<long>(in) + 2 * static_cast<long>(pad) - static_cast<long>(k);
  if (num < 0) throw ShapeError(std::string(what) + ": non-positive output extent");
  return static_cast<std::size_t>(num) / stride + 1;
}

}  // namespace detail

/// Cross-correlation. weight [Cout, Cin, kh, kw], bias [Cout] or an empty Var.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int padding) {
  const auto& xs = tape.value(x).shape();
  const auto& ws = tape.value(weight).shape();
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ws, 4, "conv2d weight");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (ws[1] != xs[1]) throw ShapeError("conv2d: channel mismatch " + shape_str(xs) + " vs weight " + shape_str(ws));
  const bool has_bias = bias.id != Var{}.id;
  if (has_bias && tape.value(bias).shape() != Shape{ws[0]}) throw ShapeError("conv2d: bias shape mismatch");

  const std::size_t N = xs[0], Cout = ws[0];
  detail::ConvGeometry g{xs[1], xs[2], xs[3], ws[2], ws[3], std::size_t(stride), std::size_t(padding), 0, 0};
  g.out_h = detail::conv_extent(g.height, g.kh, g.stride, g.pad, "conv2d");
  g.out_w = detail::conv_extent(g.width, g.kw, g.stride, g.pad, "conv2d");
  const std::size_t K = g.rows(), P = g.cols(), in_len = g.channels * g.height * g.width;

  Tensor<T> out({N, Cout, g.out_h, g.out_w});
  std::vector<T> col(g.is_pointwise() ? 0 : K * P);
  detail::CMatMap<T> W(tape.value(weight).ptr(), Cout, K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = tape.value(x).ptr() + n * in_len;
    if (!g.is_pointwise()) detail::im2col(xn, g, col.data());
    detail::CMatMap<T> C(g.is_pointwise() ? xn : col.data(), K, P);
    detail::MatMap<T> O(out.ptr() + n * Cout * P, Cout, P);
    O.noalias() = W * C;
    if (has_bias) {
      const T* b = tape.value(bias).ptr();
      for (std::size_t c = 0; c < Cout; ++c) O.row(c).array() += b[c];
    }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || (has_bias && tape.requires_grad(bias));
  return tape.push("conv2d", std::move(out), rg, [x, weight, bias, has_bias, g, N, Cout, K, P, in_len](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gout = t.grad_of(self);
    const bool gx = t.requires_grad(x), gw = t.requires_grad(weight), gb = has_bias && t.requires_grad(bias);
    std::vector<T> col(g.is_pointwise() ? 0 : K * P);
    std::vector<T> dcol(gx && !g.is_pointwise() ? K * P : 0);
    detail::CMatMap<T> W(t.value(weight).ptr(), Cout, K);
    for (std::size_t n = 0; n < N; ++n) {
      detail::CMatMap<T> dO(gout.ptr() + n * Cout * P, Cout, P);
      const T* xn = t.value(x).ptr() + n * in_len;
      if (gw) {
        if (!g.is_pointwise()) detail::im2col(xn, g, col.data());
        detail::CMatMap<T> C(g.is_pointwise() ? xn : col.data(), K, P);
        detail::MatMap<T> dW(t.grad_buffer(weight.id).ptr(), Cout, K);
        dW.noalias() += dO * C.transpose();
      }
      if (gb) {
        T* db = t.grad_buffer(bias.id).ptr();
        const T* go = gout.ptr() + n * Cout * P;
        for (std::size_t c = 0; c < Cout; ++c) {
          T acc{0};
          for (std::size_t p = 0; p < P; ++p) acc += go[c * P + p];
          db[c] += acc;
        }
      }
      if (gx) {
        T* dxn = t.grad_buffer(x.id).ptr() + n * in_len;
        if (g.is_pointwise()) {
          detail::MatMap<T> dX(dxn, K, P);
          dX.noalias() += W.transpose() * dO;
        } else {
          detail::MatMap<T> dC(dcol.data(), K, P);
          dC.noalias() = W.transpose() * dO;
          detail::col2im_add(dcol.data(), g, dxn);
        }
      }
    }
  });
}

/// Transposed convolution, the linear adjoint of conv2d with the same
/// weight. weight [Cin, Cout, kh, kw]; output extent (H-1)*stride - 2*padding + kh.
template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int padding) {
  const auto& xs = tape.value(x).shape();
  const auto& ws = tape.value(weight).shape();
  detail::require_rank(xs, 4, "conv_transpose2d input");
  detail::require_rank(ws, 4, "conv_transpose2d weight");
  if (stride < 1 || padding < 0) throw ShapeError("conv_transpose2d: stride must be >= 1 and padding >= 0");
  if (ws[0] != xs[1]) throw ShapeError("conv_transpose2d: channel mismatch " + shape_str(xs) + " vs weight " + shape_str(ws));
  const bool has_bias = bias.id != Var{}.id;
  if (has_bias && tape.value(bias).shape() != Shape{ws[1]}) throw ShapeError("conv_transpose2d: bias shape mismatch");

  const long oh = (static_cast<long>(xs[2]) - 1) * stride - 2L * padding + static_cast<long>(ws[2]);
  const long ow = (static_cast<long>(xs[3]) - 1) * stride - 2L * padding + static_cast<long>(ws[3]);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: non-positive output extent");

  const std::size_t N = xs[0], Cin = xs[1], Cout = ws[1], HW = xs[2] * xs[3];
  // Geometry of the forward convolution that this op is the adjoint of.
  detail::ConvGeometry g{Cout, std::size_t(oh), std::size_t(ow), ws[2], ws[3], std::size_t(stride), std::size_t(padding), xs[2], xs[3]};
  const std::size_t K = g.rows(), out_len = Cout * g.height * g.width;

  Tensor<T> out({N, Cout, g.height, g.width});
  std::vector<T> col(K * HW);
  detail::CMatMap<T> W(tape.value(weight).ptr(), Cin, K);
  for (std::size_t n = 0; n < N; ++n) {
    detail::CMatMap<T> X(tape.value(x).ptr() + n * Cin * HW, Cin, HW);
    detail::MatMap<T> C(col.data(), K, HW);
    C.noalias() = W.transpose() * X;
    T* on = out.ptr() + n * out_len;
    detail::col2im_add(col.data(), g, on);
    if (has_bias) {
      const T* b = tape.value(bias).ptr();
      for (std::size_t c = 0; c < Cout; ++c)
        for (std::size_t p = 0; p < g.height * g.width; ++p) on[c * g.height * g.width + p] += b[c];
    }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || (has_bias && tape.requires_grad(bias));
  return tape.push("conv_transpose2d", std::move(out), rg, [x, weight, bias, has_bias, g, N, Cin, Cout, K, HW, out_len](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gout = t.grad_of(self);
    const bool gx = t.requires_grad(x), gw = t.requires_grad(weight), gb = has_bias && t.requires_grad(bias);
    std::vector<T> dcol(K * HW);
    detail::CMatMap<T> W(t.value(weight).ptr(), Cin, K);
    for (std::size_t n = 0; n < N; ++n) {
      const T* gn = gout.ptr() + n * out_len;
      if (gx || gw) detail::im2col(gn, g, dcol.data());
      detail::CMatMap<T> dC(dcol.data(), K, HW);
      if (gx) {
        detail::MatMap<T> dX(t.grad_buffer(x.id).ptr() + n * Cin * HW, Cin, HW);
        dX.noalias() += W * dC;
      }
      if (gw) {
        detail::CMatMap<T> X(t.value(x).ptr() + n * Cin * HW, Cin, HW);
        detail::MatMap<T> dW(t.grad_buffer(weight.id).ptr(), Cin, K);
        dW.noalias() += X * dC.transpose();
      }
      if (gb) {
        T* db = t.grad_buffer(bias.id).ptr();
        const std::size_t plane = g.height * g.width;
        for (std::size_t c = 0; c < Cout; ++c) {
          T s{0};
          for (std::size_t p = 0; p < plane; ++p) s += gn[c * plane + p];
          db[c] += s;
        }
      }
    }
  });
}

enum class ActivationKind { Relu, LeakyRelu, Sigmoid, Tanh };

struct Activation {
  ActivationKind kind = ActivationKind::Relu;
  double alpha = 0.2;  // leaky slope

  static Activation relu() { return {ActivationKind::Relu, 0.0}; }
  static Activation leaky_relu(double a) { return {ActivationKind::LeakyRelu, a}; }
  static Activation sigmoid() { return {ActivationKind::Sigmoid, 0.0}; }
  static Activation tanh() { return {ActivationKind::Tanh, 0.0}; }
};

template <typename T>
Var activation(Tape<T>& tape, Var x, Activation act) {
  if (act.kind == ActivationKind::LeakyRelu && !(act.alpha > 0.0 && act.alpha < 1.0))
    throw ShapeError("leaky_relu: alpha must lie in (0,1)");
  const Tensor<T>& in = tape.value(x);
  Tensor<T> out(in.shape());
  const T a = static_cast<T>(act.alpha);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    switch (act.kind) {
      case ActivationKind::Relu: out[i] = v > T{0} ? v : T{0}; break;
      case ActivationKind::LeakyRelu: out[i] = v > T{0} ? v : a * v; break;
      case ActivationKind::Sigmoid: out[i] = T{1} / (T{1} + std::exp(-v)); break;
      case ActivationKind::Tanh: out[i] = std::tanh(v); break;
    }
  }
  static constexpr const char* names[] = {"relu", "leaky_relu", "sigmoid", "tanh"};
  return tape.push(names[static_cast<int>(act.kind)], std::move(out), tape.requires_grad(x), [x, act, a](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& y = t.value_of(self);
    const Tensor<T>& in = t.value(x);
    Tensor<T>& dx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (act.kind) {
        case ActivationKind::Relu: dx[i] += in[i] > T{0} ? g[i] : T{0}; break;
        case ActivationKind::LeakyRelu: dx[i] += in[i] > T{0} ? g[i] : a * g[i]; break;
        case ActivationKind::Sigmoid: dx[i] += g[i] * y[i] * (T{1} - y[i]); break;
        case ActivationKind::Tanh: dx[i] += g[i] * (T{1} - y[i] * y[i]); break;
      }
    }
  });
}

/// Per-(n, c) plane normalization with learned gain and shift [C].
template <typename T>
Var instance_norm(Tape<T>& tape, Var x, Var gain, Var shift, double eps = 1e-5) {
  const auto& xs = tape.value(x).shape();
  detail::require_rank(xs, 4, "instance_norm");
  const std::size_t N = xs[0], C = xs[1], M = xs[2] * xs[3];
  if (M < 2) throw ShapeError("instance_norm: degenerate 1x1 plane");
  if (tape.value(gain).shape() != Shape{C} || tape.value(shift).shape() != Shape{C})
    throw ShapeError("instance_norm: gain/shift must have shape [C]");

  const Tensor<T>& in = tape.value(x);
  const T* gp = tape.value(gain).ptr();
  const T* bp = tape.value(shift).ptr();
  Tensor<T> out(xs);
  std::vector<T> xhat(in.size());
  std::vector<T> rstd(N * C);
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = in.ptr() + p * M;
    T mean{0};
    for (std::size_t i = 0; i < M; ++i) mean += src[i];
    mean /= static_cast<T>(M);
    T var{0};
    for (std::size_t i = 0; i < M; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(M);
    const T r = T{1} / std::sqrt(var + static_cast<T>(eps));
    rstd[p] = r;
    const std::size_t c = p % C;
    for (std::size_t i = 0; i < M; ++i) {
      const T h = (src[i] - mean) * r;
      xhat[p * M + i] = h;
      out[p * M + i] = h * gp[c] + bp[c];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(shift);
  return tape.push("instance_norm", std::move(out), rg, [x, gain, shift, N, C, M, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const T* gp = t.value(gain).ptr();
    const bool gx = t.requires_grad(x), gg = t.requires_grad(gain), gs = t.requires_grad(shift);
    for (std::size_t p = 0; p < N * C; ++p) {
      const std::size_t c = p % C;
      const T* dy = g.ptr() + p * M;
      const T* h = xhat.data() + p * M;
      T sum_dy{0}, sum_dy_h{0};
      for (std::size_t i = 0; i < M; ++i) {
        sum_dy += dy[i];
        sum_dy_h += dy[i] * h[i];
      }
      if (gg) t.grad_buffer(gain.id)[c] += sum_dy_h;
      if (gs) t.grad_buffer(shift.id)[c] += sum_dy;
      if (gx) {
        T* dx = t.grad_buffer(x.id).ptr() + p * M;
        const T k = gp[c] * rstd[p] / static_cast<T>(M);
        for (std::size_t i = 0; i < M; ++i)
          dx[i] += k * (static_cast<T>(M) * dy[i] - sum_dy - h[i] * sum_dy_h);
      }
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  tape.value(a).require_same_shape(tape.value(b), "add");
  Tensor<T> out = tape.value(a);
  out += tape.value(b);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push("add", std::move(out), rg, [a, b](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (t.requires_grad(a)) t.grad_buffer(a.id) += g;
    if (t.requires_grad(b)) t.grad_buffer(b.id) += g;
  });
}

/// alpha*a + beta*b for equally shaped inputs (used to combine loss terms).
template <typename T>
Var axpby(Tape<T>& tape, Var a, double alpha, Var b, double beta) {
  tape.value(a).require_same_shape(tape.value(b), "axpby");
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  Tensor<T> out(va.shape());
  const T al = static_cast<T>(alpha), be = static_cast<T>(beta);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = al * va[i] + be * vb[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push("axpby", std::move(out), rg, [a, b, al, be](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (t.requires_grad(a)) {
      Tensor<T>& d = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += al * g[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& d = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += be * g[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, double factor) {
  const Tensor<T>& va = tape.value(a);
  Tensor<T> out(va.shape());
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * va[i];
  return tape.push("scale", std::move(out), tape.requires_grad(a), [a, f](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    Tensor<T>& d = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  tape.value(a).require_same_shape(tape.value(b), "mul");
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push("mul", std::move(out), rg, [a, b](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (t.requires_grad(a)) {
      Tensor<T>& d = t.grad_buffer(a.id);
      const Tensor<T>& vb = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * vb[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& d = t.grad_buffer(b.id);
      const Tensor<T>& va = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const Tensor<T>& va = tape.value(a);
  T s{0};
  for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
  return tape.push("sum", Tensor<T>::scalar(s), tape.requires_grad(a), [a](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0];
    Tensor<T>& d = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
  });
}

/// Concatenate two N,C,H,W tensors along the channel axis.
template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const auto& as = tape.value(a).shape();
  const auto& bs = tape.value(b).shape();
  detail::require_rank(as, 4, "concat_channels");
  detail::require_rank(bs, 4, "concat_channels");
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) throw ShapeError("concat_channels: mismatched " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t N = as[0], plane = as[2] * as[3], la = as[1] * plane, lb = bs[1] * plane;
  Tensor<T> out({N, as[1] + bs[1], as[2], as[3]});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(tape.value(a).ptr() + n * la, la, out.ptr() + n * (la + lb));
    std::copy_n(tape.value(b).ptr() + n * lb, lb, out.ptr() + n * (la + lb) + la);
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push("concat_channels", std::move(out), rg, [a, b, N, la, lb](Tape<T>& t, std::size_t self) {
    const T* g = t.grad_of(self).ptr();
    const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    for (std::size_t n = 0; n < N; ++n) {
      if (ga) {
        T* d = t.grad_buffer(a.id).ptr() + n * la;
        for (std::size_t i = 0; i < la; ++i) d[i] += g[n * (la + lb) + i];
      }
      if (gb) {
        T* d = t.grad_buffer(b.id).ptr() + n * lb;
        for (std::size_t i = 0; i < lb; ++i) d[i] += g[n * (la + lb) + la + i];
      }
    }
  });
}

/// N,C,H,W -> N,C spatial mean.
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const auto& xs = tape.value(x).shape();
  detail::require_rank(xs, 4, "global_avg_pool");
  const std::size_t NC = xs[0] * xs[1], M = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  const T* src = tape.value(x).ptr();
  for (std::size_t p = 0; p < NC; ++p) {
    T s{0};
    for (std::size_t i = 0; i < M; ++i) s += src[p * M + i];
    out[p] = s / static_cast<T>(M);
  }
  return tape.push("global_avg_pool", std::move(out), tape.requires_grad(x), [x, NC, M](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    T* d = t.grad_buffer(x.id).ptr();
    for (std::size_t p = 0; p < NC; ++p) {
      const T v = g[p] / static_cast<T>(M);
      for (std::size_t i = 0; i < M; ++i) d[p * M + i] += v;
    }
  });
}

/// Affine map: x [N, In], weight [Out, In], bias [Out] -> [N, Out].
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const auto& xs = tape.value(x).shape();
  const auto& ws = tape.value(weight).shape();
  detail::require_rank(xs, 2, "linear input");
  detail::require_rank(ws, 2, "linear weight");
  if (xs[1] != ws[1]) throw ShapeError("linear: feature mismatch");
  if (tape.value(bias).shape() != Shape{ws[0]}) throw ShapeError("linear: bias shape mismatch");
  const std::size_t N = xs[0], In = xs[1], Out = ws[0];
  Tensor<T> out({N, Out});
  detail::CMatMap<T> X(tape.value(x).ptr(), N, In);
  detail::CMatMap<T> W(tape.value(weight).ptr(), Out, In);
  detail::MatMap<T> Y(out.ptr(), N, Out);
  Y.noalias() = X * W.transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Out; ++o) Y(n, o) += tape.value(bias)[o];
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.push("linear", std::move(out), rg, [x, weight, bias, N, In, Out](Tape<T>& t, std::size_t self) {
    detail::CMatMap<T> dY(t.grad_of(self).ptr(), N, Out);
    if (t.requires_grad(x)) {
      detail::MatMap<T> dX(t.grad_buffer(x.id).ptr(), N, In);
      dX.noalias() += dY * detail::CMatMap<T>(t.value(weight).ptr(), Out, In);
    }
    if (t.requires_grad(weight)) {
      detail::MatMap<T> dW(t.grad_buffer(weight.id).ptr(), Out, In);
      dW.noalias() += dY.transpose() * detail::CMatMap<T>(t.value(x).ptr(), N, In);
    }
    if (t.requires_grad(bias)) {
      T* db = t.grad_buffer(bias.id).ptr();
      for (std::size_t o = 0; o < Out; ++o) db[o] += dY.col(o).sum();
    }
  });
}

}  // namespace fundus
