#ifndef VSEG_OPS_HPP
#define VSEG_OPS_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "vseg/tensor.hpp"

// Differentiable primitives. Each op computes its value eagerly and, when any
// input requires a gradient, attaches a closure that scatters the output
// gradient into the inputs. Heavy inner products (linear, conv3d) are mapped
// onto Eigen GEMMs; everything else is explicit loops.

namespace vseg {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

template <typename T>
void wire(std::shared_ptr<Node<T>>& out, std::vector<std::shared_ptr<Node<T>>> parents) {
  bool need = false;
  if (grad_enabled())
    for (const auto& p : parents) need = need || p->needs_grad;
  out->parents = std::move(parents);
  out->needs_grad = need;
}

template <typename T>
inline void accum(Node<T>& p, int64_t i, T v) {
  p.grad[static_cast<size_t>(i)] += v;
}

// Scalar-with-tensor is the only permitted broadcast.
enum class Bcast { none, left, right };

template <typename T>
Bcast binary_layout(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::none;
  if (a.size() == 1) return Bcast::left;
  if (b.size() == 1) return Bcast::right;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                   " are neither equal nor scalar-broadcastable");
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

template <typename T>
std::vector<T>& scratch_a() {
  static thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::binary_layout(a, b, "add");
  auto out = detail::make_node<T>("add", bc == detail::Bcast::left ? b.shape() : a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out->value;
  const size_t n = ov.size();
  switch (bc) {
    case detail::Bcast::none:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
      break;
    case detail::Bcast::left:
      for (size_t i = 0; i < n; ++i) ov[i] = av[0] + bv[i];
      break;
    case detail::Bcast::right:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[0];
      break;
  }
  detail::wire(out, {a.node(), b.node()});
  if (out->needs_grad)
    out->backprop = [](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const size_t n = self.value.size();
      if (pa.needs_grad) {
        pa.ensure_grad();
        if (pa.value.size() == n)
          for (size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
        else
          for (size_t i = 0; i < n; ++i) pa.grad[0] += self.grad[i];
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        if (pb.value.size() == n)
          for (size_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i];
        else
          for (size_t i = 0; i < n; ++i) pb.grad[0] += self.grad[i];
      }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::binary_layout(a, b, "sub");
  auto out = detail::make_node<T>("sub", bc == detail::Bcast::left ? b.shape() : a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out->value;
  const size_t n = ov.size();
  switch (bc) {
    case detail::Bcast::none:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
      break;
    case detail::Bcast::left:
      for (size_t i = 0; i < n; ++i) ov[i] = av[0] - bv[i];
      break;
    case detail::Bcast::right:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[0];
      break;
  }
  detail::wire(out, {a.node(), b.node()});
  if (out->needs_grad)
    out->backprop = [](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const size_t n = self.value.size();
      if (pa.needs_grad) {
        pa.ensure_grad();
        if (pa.value.size() == n)
          for (size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
        else
          for (size_t i = 0; i < n; ++i) pa.grad[0] += self.grad[i];
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        if (pb.value.size() == n)
          for (size_t i = 0; i < n; ++i) pb.grad[i] -= self.grad[i];
        else
          for (size_t i = 0; i < n; ++i) pb.grad[0] -= self.grad[i];
      }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::binary_layout(a, b, "mul");
  auto out = detail::make_node<T>("mul", bc == detail::Bcast::left ? b.shape() : a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out->value;
  const size_t n = ov.size();
  switch (bc) {
    case detail::Bcast::none:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
      break;
    case detail::Bcast::left:
      for (size_t i = 0; i < n; ++i) ov[i] = av[0] * bv[i];
      break;
    case detail::Bcast::right:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[0];
      break;
  }
  detail::wire(out, {a.node(), b.node()});
  if (out->needs_grad)
    out->backprop = [](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const size_t n = self.value.size();
      const bool sa = pa.value.size() != n;
      const bool sb = pb.value.size() != n;
      if (pa.needs_grad) {
        pa.ensure_grad();
        for (size_t i = 0; i < n; ++i) pa.grad[sa ? 0 : i] += self.grad[i] * pb.value[sb ? 0 : i];
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        for (size_t i = 0; i < n; ++i) pb.grad[sb ? 0 : i] += self.grad[i] * pa.value[sa ? 0 : i];
      }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::binary_layout(a, b, "div");
  auto out = detail::make_node<T>("div", bc == detail::Bcast::left ? b.shape() : a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out->value;
  const size_t n = ov.size();
  const bool sa = bc == detail::Bcast::left;
  const bool sb = bc == detail::Bcast::right;
  for (size_t i = 0; i < n; ++i) ov[i] = av[sa ? 0 : i] / bv[sb ? 0 : i];
  detail::wire(out, {a.node(), b.node()});
  if (out->needs_grad)
    out->backprop = [](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const size_t n = self.value.size();
      const bool sa = pa.value.size() != n;
      const bool sb = pb.value.size() != n;
      if (pa.needs_grad) {
        pa.ensure_grad();
        for (size_t i = 0; i < n; ++i) pa.grad[sa ? 0 : i] += self.grad[i] / pb.value[sb ? 0 : i];
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          T bi = pb.value[sb ? 0 : i];
          pb.grad[sb ? 0 : i] -= self.grad[i] * pa.value[sa ? 0 : i] / (bi * bi);
        }
      }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  auto out = make_node<T>(name, x.shape());
  const auto& xv = x.values();
  auto& ov = out->value;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [bwd](Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i)
        p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    };
  return Tensor<T>(out);
}

}  // namespace detail

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  T cc = static_cast<T>(c);
  return detail::unary_op(
      "scale", x, [cc](T v) { return cc * v; }, [cc](T, T) { return cc; });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, double c) {
  T cc = static_cast<T>(c);
  return detail::unary_op(
      "add_const", x, [cc](T v) { return v + cc; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> negate(const Tensor<T>& x) {
  return detail::unary_op(
      "negate", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.values())
    if (!(v > T(0))) throw DomainError("log: non-positive input element");
  return detail::unary_op(
      "log", x, [](T v) { return std::log(v); }, [](T xv, T) { return T(1) / xv; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      "silu", x, [](T v) { return v * detail::stable_sigmoid(v); },
      [](T xv, T) {
        T s = detail::stable_sigmoid(xv);
        return s * (T(1) + xv * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      "softplus", x, [](T v) { return detail::stable_softplus(v); },
      [](T xv, T) { return detail::stable_sigmoid(xv); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi) {
  T l = static_cast<T>(lo), h = static_cast<T>(hi);
  return detail::unary_op(
      "clamp", x, [l, h](T v) { return v < l ? l : (v > h ? h : v); },
      [l, h](T xv, T) { return (xv > l && xv < h) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// linear: matrix product over the last axis, broadcast over leading axes.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = Tensor<T>()) {
  if (x.rank() < 1) throw ShapeError("linear: input must have rank >= 1");
  if (w.rank() != 2) throw ShapeError("linear: weight must be [Cout,Cin], got " + shape_str(w.shape()));
  const int64_t cin = x.shape().back();
  const int64_t cout = w.dim(0);
  if (w.dim(1) != cin)
    throw ShapeError("linear: input last extent " + std::to_string(cin) + " != weight Cin " +
                     std::to_string(w.dim(1)));
  if (bias.defined() && bias.size() != cout)
    throw ShapeError("linear: bias length " + std::to_string(bias.size()) + " != Cout " + std::to_string(cout));

  Shape oshape = x.shape();
  oshape.back() = cout;
  auto out = detail::make_node<T>("linear", oshape);
  const int64_t m = x.size() / cin;

  detail::CMapM<T> X(x.data(), m, cin), W(w.data(), cout, cin);
  detail::MapM<T> O(out->value.data(), m, cout);
  O.noalias() = X * W.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data(), cout);
    O.rowwise() += bv;
  }

  std::vector<std::shared_ptr<detail::Node<T>>> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  detail::wire(out, std::move(parents));
  if (out->needs_grad)
    out->backprop = [m, cin, cout](detail::Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pw = *self.parents[1];
      detail::CMapM<T> G(self.grad.data(), m, cout);
      if (px.needs_grad) {
        px.ensure_grad();
        detail::CMapM<T> W(pw.value.data(), cout, cin);
        detail::MapM<T> GX(px.grad.data(), m, cin);
        GX.noalias() += G * W;
      }
      if (pw.needs_grad) {
        pw.ensure_grad();
        detail::CMapM<T> X(px.value.data(), m, cin);
        detail::MapM<T> GW(pw.grad.data(), cout, cin);
        GW.noalias() += G.transpose() * X;
      }
      if (self.parents.size() > 2 && self.parents[2]->needs_grad) {
        auto& pb = *self.parents[2];
        pb.ensure_grad();
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(pb.grad.data(), cout);
        GB += G.colwise().sum();
      }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// conv3d: zero "same" padding, odd kernels, optional isotropic stride
// (stride > 1 is used by the encoder for downsampling).
// ---------------------------------------------------------------------------

namespace detail {

struct Conv3dDims {
  int64_t B, Cin, D, H, W;
  int64_t Cout, kd, kh, kw;
  int64_t pd, ph, pw;
  int64_t Do, Ho, Wo;
  int64_t stride;
  int64_t nvox() const { return Do * Ho * Wo; }
  int64_t kvol() const { return Cin * kd * kh * kw; }
};

template <typename T>
Conv3dDims conv3d_dims(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int64_t stride) {
  if (x.rank() != 5) throw ShapeError("conv3d: input must be [B,Cin,D,H,W], got " + shape_str(x.shape()));
  if (k.rank() != 5) throw ShapeError("conv3d: kernel must be [Cout,Cin,kd,kh,kw], got " + shape_str(k.shape()));
  Conv3dDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.D = x.dim(2);
  d.H = x.dim(3);
  d.W = x.dim(4);
  d.Cout = k.dim(0);
  d.kd = k.dim(2);
  d.kh = k.dim(3);
  d.kw = k.dim(4);
  d.stride = stride;
  if (k.dim(1) != d.Cin)
    throw ShapeError("conv3d: kernel Cin (dim 1) is " + std::to_string(k.dim(1)) + " but input has " +
                     std::to_string(d.Cin) + " channels");
  if (d.kd % 2 == 0 || d.kh % 2 == 0 || d.kw % 2 == 0)
    throw ShapeError("conv3d: kernel extents must be odd, got " + shape_str(k.shape()));
  if (bias.defined() && bias.size() != d.Cout)
    throw ShapeError("conv3d: bias length " + std::to_string(bias.size()) + " != Cout " + std::to_string(d.Cout));
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  d.pd = (d.kd - 1) / 2;
  d.ph = (d.kh - 1) / 2;
  d.pw = (d.kw - 1) / 2;
  d.Do = (d.D + 2 * d.pd - d.kd) / stride + 1;
  d.Ho = (d.H + 2 * d.ph - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * d.pw - d.kw) / stride + 1;
  return d;
}

// col layout: [Cin*kd*kh*kw, Do*Ho*Wo], one row per kernel tap.
template <typename T>
void im2col(const T* x, const Conv3dDims& c, std::vector<T>& col) {
  const int64_t nvox = c.nvox();
  col.assign(static_cast<size_t>(c.kvol() * nvox), T(0));
  const int64_t s = c.stride;
  for (int64_t ci = 0; ci < c.Cin; ++ci) {
    const T* xc = x + ci * c.D * c.H * c.W;
    for (int64_t jd = 0; jd < c.kd; ++jd)
      for (int64_t jh = 0; jh < c.kh; ++jh)
        for (int64_t jw = 0; jw < c.kw; ++jw) {
          T* row = col.data() + (((ci * c.kd + jd) * c.kh + jh) * c.kw + jw) * nvox;
          for (int64_t od = 0; od < c.Do; ++od) {
            const int64_t d = od * s - c.pd + jd;
            if (d < 0 || d >= c.D) continue;
            for (int64_t oh = 0; oh < c.Ho; ++oh) {
              const int64_t h = oh * s - c.ph + jh;
              if (h < 0 || h >= c.H) continue;
              T* dst = row + (od * c.Ho + oh) * c.Wo;
              const T* src = xc + (d * c.H + h) * c.W;
              if (s == 1) {
                const int64_t w0 = std::max<int64_t>(0, c.pw - jw);
                const int64_t w1 = std::min<int64_t>(c.Wo, c.W + c.pw - jw);
                for (int64_t ow = w0; ow < w1; ++ow) dst[ow] = src[ow - c.pw + jw];
              } else {
                for (int64_t ow = 0; ow < c.Wo; ++ow) {
                  const int64_t w = ow * s - c.pw + jw;
                  if (w >= 0 && w < c.W) dst[ow] = src[w];
                }
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const Conv3dDims& c, T* gx) {
  const int64_t nvox = c.nvox();
  const int64_t s = c.stride;
  for (int64_t ci = 0; ci < c.Cin; ++ci) {
    T* gc = gx + ci * c.D * c.H * c.W;
    for (int64_t jd = 0; jd < c.kd; ++jd)
      for (int64_t jh = 0; jh < c.kh; ++jh)
        for (int64_t jw = 0; jw < c.kw; ++jw) {
          const T* row = col.data() + (((ci * c.kd + jd) * c.kh + jh) * c.kw + jw) * nvox;
          for (int64_t od = 0; od < c.Do; ++od) {
            const int64_t d = od * s - c.pd + jd;
            if (d < 0 || d >= c.D) continue;
            for (int64_t oh = 0; oh < c.Ho; ++oh) {
              const int64_t h = oh * s - c.ph + jh;
              if (h < 0 || h >= c.H) continue;
              const T* src = row + (od * c.Ho + oh) * c.Wo;
              T* dst = gc + (d * c.H + h) * c.W;
              if (s == 1) {
                const int64_t w0 = std::max<int64_t>(0, c.pw - jw);
                const int64_t w1 = std::min<int64_t>(c.Wo, c.W + c.pw - jw);
                for (int64_t ow = w0; ow < w1; ++ow) dst[ow - c.pw + jw] += src[ow];
              } else {
                for (int64_t ow = 0; ow < c.Wo; ++ow) {
                  const int64_t w = ow * s - c.pw + jw;
                  if (w >= 0 && w < c.W) dst[w] += src[ow];
                }
              }
            }
          }
        }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias = Tensor<T>(),
                 int64_t stride = 1) {
  const auto c = detail::conv3d_dims(x, k, bias, stride);
  auto out = detail::make_node<T>("conv3d", {c.B, c.Cout, c.Do, c.Ho, c.Wo});
  const int64_t nvox = c.nvox();
  const int64_t in_sz = c.Cin * c.D * c.H * c.W;
  const bool pointwise = (c.kd == 1 && c.kh == 1 && c.kw == 1 && stride == 1);

  detail::CMapM<T> K(k.data(), c.Cout, c.kvol());
  for (int64_t b = 0; b < c.B; ++b) {
    detail::MapM<T> O(out->value.data() + b * c.Cout * nvox, c.Cout, nvox);
    if (pointwise) {
      detail::CMapM<T> X(x.data() + b * in_sz, c.Cin, nvox);
      O.noalias() = K * X;
    } else {
      auto& col = detail::scratch_a<T>();
      detail::im2col(x.data() + b * in_sz, c, col);
      detail::CMapM<T> C(col.data(), c.kvol(), nvox);
      O.noalias() = K * C;
    }
    if (bias.defined()) {
      for (int64_t co = 0; co < c.Cout; ++co) O.row(co).array() += bias.values()[static_cast<size_t>(co)];
    }
  }

  std::vector<std::shared_ptr<detail::Node<T>>> parents = {x.node(), k.node()};
  if (bias.defined()) parents.push_back(bias.node());
  detail::wire(out, std::move(parents));
  if (out->needs_grad)
    out->backprop = [c, nvox, in_sz, pointwise](detail::Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pk = *self.parents[1];
      detail::CMapM<T> K(pk.value.data(), c.Cout, c.kvol());
      if (px.needs_grad) px.ensure_grad();
      if (pk.needs_grad) pk.ensure_grad();
      for (int64_t b = 0; b < c.B; ++b) {
        detail::CMapM<T> G(self.grad.data() + b * c.Cout * nvox, c.Cout, nvox);
        if (pointwise) {
          if (pk.needs_grad) {
            detail::CMapM<T> X(px.value.data() + b * in_sz, c.Cin, nvox);
            detail::MapM<T> GK(pk.grad.data(), c.Cout, c.kvol());
            GK.noalias() += G * X.transpose();
          }
          if (px.needs_grad) {
            detail::MapM<T> GX(px.grad.data() + b * in_sz, c.Cin, nvox);
            GX.noalias() += K.transpose() * G;
          }
        } else {
          auto& col = detail::scratch_a<T>();
          if (pk.needs_grad) {
            detail::im2col(px.value.data() + b * in_sz, c, col);
            detail::CMapM<T> C(col.data(), c.kvol(), nvox);
            detail::MapM<T> GK(pk.grad.data(), c.Cout, c.kvol());
            GK.noalias() += G * C.transpose();
          }
          if (px.needs_grad) {
            col.assign(static_cast<size_t>(c.kvol() * nvox), T(0));
            detail::MapM<T> GC(col.data(), c.kvol(), nvox);
            GC.noalias() = K.transpose() * G;
            detail::col2im_add(col, c, px.grad.data() + b * in_sz);
          }
        }
      }
      if (self.parents.size() > 2 && self.parents[2]->needs_grad) {
        auto& pb = *self.parents[2];
        pb.ensure_grad();
        for (int64_t b = 0; b < c.B; ++b) {
          detail::CMapM<T> G(self.grad.data() + b * c.Cout * nvox, c.Cout, nvox);
          for (int64_t co = 0; co < c.Cout; ++co) pb.grad[static_cast<size_t>(co)] += G.row(co).sum();
        }
      }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline void check_axes(const Shape& shape, const std::vector<int>& axes, const char* op) {
  std::vector<bool> seen(shape.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(shape.size()))
      throw ShapeError(std::string(op) + ": axis " + std::to_string(a) + " out of range for shape " +
                       shape_str(shape));
    if (seen[static_cast<size_t>(a)]) throw ShapeError(std::string(op) + ": duplicate axis " + std::to_string(a));
    seen[static_cast<size_t>(a)] = true;
  }
}

inline Shape reduced_shape(const Shape& shape, const std::vector<int>& axes, bool keepdims) {
  std::vector<bool> red(shape.size(), false);
  for (int a : axes) red[static_cast<size_t>(a)] = true;
  Shape out;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (red[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(shape[i]);
    }
  }
  return out;
}

// Flat input index -> flat output index for a reduction, as a reusable map.
struct ReduceIndexer {
  Shape in_shape, in_strides, out_strides_for_in;  // out stride per input axis, 0 if reduced
  int64_t map(int64_t flat) const {
    int64_t o = 0;
    for (size_t ax = 0; ax < in_shape.size(); ++ax) {
      int64_t idx = (flat / in_strides[ax]) % in_shape[ax];
      o += idx * out_strides_for_in[ax];
    }
    return o;
  }
};

inline ReduceIndexer make_reduce_indexer(const Shape& shape, const std::vector<int>& axes, bool keepdims) {
  std::vector<bool> red(shape.size(), false);
  for (int a : axes) red[static_cast<size_t>(a)] = true;
  Shape oshape = reduced_shape(shape, axes, keepdims);
  Shape ostr = strides_of(oshape);
  ReduceIndexer r;
  r.in_shape = shape;
  r.in_strides = strides_of(shape);
  r.out_strides_for_in.assign(shape.size(), 0);
  size_t oi = 0;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (red[i]) {
      if (keepdims) ++oi;  // extent-1 axis contributes stride 0 anyway
    } else {
      r.out_strides_for_in[i] = ostr[oi++];
    }
  }
  return r;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false) {
  if (axes.empty()) return x;
  detail::check_axes(x.shape(), axes, "reduce_sum");
  auto idx = detail::make_reduce_indexer(x.shape(), axes, keepdims);
  auto out = detail::make_node<T>("reduce_sum", detail::reduced_shape(x.shape(), axes, keepdims));
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->value[static_cast<size_t>(idx.map(static_cast<int64_t>(i)))] += xv[i];
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [idx](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < p.value.size(); ++i)
        p.grad[i] += self.grad[static_cast<size_t>(idx.map(static_cast<int64_t>(i)))];
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false) {
  if (axes.empty()) return x;
  detail::check_axes(x.shape(), axes, "reduce_mean");
  auto idx = detail::make_reduce_indexer(x.shape(), axes, keepdims);
  Shape oshape = detail::reduced_shape(x.shape(), axes, keepdims);
  const T count = static_cast<T>(x.size() / numel(oshape));
  auto out = detail::make_node<T>("reduce_mean", oshape);
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->value[static_cast<size_t>(idx.map(static_cast<int64_t>(i)))] += xv[i];
  for (auto& v : out->value) v /= count;
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [idx, count](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < p.value.size(); ++i)
        p.grad[i] += self.grad[static_cast<size_t>(idx.map(static_cast<int64_t>(i)))] / count;
    };
  return Tensor<T>(out);
}

/// Max-reduction; gradient routes to the first maximal element (flat order).
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false) {
  if (axes.empty()) return x;
  detail::check_axes(x.shape(), axes, "reduce_max");
  auto idx = detail::make_reduce_indexer(x.shape(), axes, keepdims);
  auto out = detail::make_node<T>("reduce_max", detail::reduced_shape(x.shape(), axes, keepdims));
  const auto& xv = x.values();
  std::vector<int64_t> argmax(out->value.size(), -1);
  for (size_t i = 0; i < xv.size(); ++i) {
    size_t o = static_cast<size_t>(idx.map(static_cast<int64_t>(i)));
    if (argmax[o] < 0 || xv[i] > out->value[o]) {
      out->value[o] = xv[i];
      argmax[o] = static_cast<int64_t>(i);
    }
  }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [argmax = std::move(argmax)](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (size_t o = 0; o < self.value.size(); ++o) p.grad[static_cast<size_t>(argmax[o])] += self.grad[o];
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<int> axes(static_cast<size_t>(x.rank()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  if (axes.empty()) return x;
  return reduce_sum(x, axes, false);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-(b,c) normalization over D,H,W with biased variance, no affine.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps) {
  if (x.rank() != 5) throw ShapeError("instance_norm: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  const int64_t groups = x.dim(0) * x.dim(1);
  const int64_t m = x.dim(2) * x.dim(3) * x.dim(4);
  if (m < 2) throw ShapeError("instance_norm: spatial size must be >= 2");
  auto out = detail::make_node<T>("instance_norm", x.shape());
  const auto& xv = x.values();
  std::vector<T> inv_std(static_cast<size_t>(groups));
  for (int64_t g = 0; g < groups; ++g) {
    const T* xs = xv.data() + g * m;
    double mean = 0;
    for (int64_t i = 0; i < m; ++i) mean += xs[i];
    mean /= static_cast<double>(m);
    double var = 0;
    for (int64_t i = 0; i < m; ++i) {
      double d = xs[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const T r = static_cast<T>(1.0 / std::sqrt(var + eps));
    inv_std[static_cast<size_t>(g)] = r;
    T* os = out->value.data() + g * m;
    const T mu = static_cast<T>(mean);
    for (int64_t i = 0; i < m; ++i) os[i] = (xs[i] - mu) * r;
  }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [groups, m, inv_std = std::move(inv_std)](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t g = 0; g < groups; ++g) {
        const T* y = self.value.data() + g * m;
        const T* gy = self.grad.data() + g * m;
        T* gx = p.grad.data() + g * m;
        double sum_gy = 0, sum_gyy = 0;
        for (int64_t i = 0; i < m; ++i) {
          sum_gy += gy[i];
          sum_gyy += gy[i] * y[i];
        }
        const T mgy = static_cast<T>(sum_gy / static_cast<double>(m));
        const T mgyy = static_cast<T>(sum_gyy / static_cast<double>(m));
        const T r = inv_std[static_cast<size_t>(g)];
        for (int64_t i = 0; i < m; ++i) gx[i] += r * (gy[i] - mgy - y[i] * mgyy);
      }
    };
  return Tensor<T>(out);
}

/// Normalizes the channel vector at each (b,d,h,w), then per-channel affine.
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, double eps, const Tensor<T>& gain, const Tensor<T>& shift) {
  if (x.rank() != 5)
    throw ShapeError("layer_norm_channels: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1);
  const int64_t sp = x.dim(2) * x.dim(3) * x.dim(4);
  if (gain.size() != C || shift.size() != C)
    throw ShapeError("layer_norm_channels: gain/shift must have length C=" + std::to_string(C));
  auto out = detail::make_node<T>("layer_norm_channels", x.shape());
  const auto& xv = x.values();
  std::vector<T> inv_std(static_cast<size_t>(B * sp));
  std::vector<T> means(static_cast<size_t>(B * sp));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t p = 0; p < sp; ++p) {
      const int64_t base = b * C * sp + p;
      double mean = 0;
      for (int64_t c = 0; c < C; ++c) mean += xv[static_cast<size_t>(base + c * sp)];
      mean /= static_cast<double>(C);
      double var = 0;
      for (int64_t c = 0; c < C; ++c) {
        double d = xv[static_cast<size_t>(base + c * sp)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const T r = static_cast<T>(1.0 / std::sqrt(var + eps));
      const size_t gidx = static_cast<size_t>(b * sp + p);
      inv_std[gidx] = r;
      means[gidx] = static_cast<T>(mean);
      for (int64_t c = 0; c < C; ++c) {
        const size_t i = static_cast<size_t>(base + c * sp);
        T yh = (xv[i] - means[gidx]) * r;
        out->value[i] = gain.values()[static_cast<size_t>(c)] * yh + shift.values()[static_cast<size_t>(c)];
      }
    }
  }
  detail::wire(out, {x.node(), gain.node(), shift.node()});
  if (out->needs_grad)
    out->backprop = [B, C, sp, inv_std = std::move(inv_std), means = std::move(means)](detail::Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& ps = *self.parents[2];
      if (px.needs_grad) px.ensure_grad();
      if (pg.needs_grad) pg.ensure_grad();
      if (ps.needs_grad) ps.ensure_grad();
      std::vector<T> yh(static_cast<size_t>(C)), gyh(static_cast<size_t>(C));
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t p = 0; p < sp; ++p) {
          const int64_t base = b * C * sp + p;
          const size_t gidx = static_cast<size_t>(b * sp + p);
          const T r = inv_std[gidx], mu = means[gidx];
          double sum_g = 0, sum_gy = 0;
          for (int64_t c = 0; c < C; ++c) {
            const size_t i = static_cast<size_t>(base + c * sp);
            yh[static_cast<size_t>(c)] = (px.value[i] - mu) * r;
            gyh[static_cast<size_t>(c)] = self.grad[i] * pg.value[static_cast<size_t>(c)];
            sum_g += gyh[static_cast<size_t>(c)];
            sum_gy += gyh[static_cast<size_t>(c)] * yh[static_cast<size_t>(c)];
            if (pg.needs_grad) pg.grad[static_cast<size_t>(c)] += self.grad[i] * yh[static_cast<size_t>(c)];
            if (ps.needs_grad) ps.grad[static_cast<size_t>(c)] += self.grad[i];
          }
          if (px.needs_grad) {
            const T mg = static_cast<T>(sum_g / static_cast<double>(C));
            const T mgy = static_cast<T>(sum_gy / static_cast<double>(C));
            for (int64_t c = 0; c < C; ++c) {
              const size_t i = static_cast<size_t>(base + c * sp);
              px.grad[i] += r * (gyh[static_cast<size_t>(c)] - mg - yh[static_cast<size_t>(c)] * mgy);
            }
          }
        }
      }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Softmax along one axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const auto& sh = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= sh[static_cast<size_t>(i)];
  const int64_t len = sh[static_cast<size_t>(axis)];
  auto out = detail::make_node<T>("softmax", sh);
  const auto& xv = x.values();
  auto& ov = out->value;
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * len * inner + i;
      T mx = xv[static_cast<size_t>(base)];
      for (int64_t j = 1; j < len; ++j) mx = std::max(mx, xv[static_cast<size_t>(base + j * inner)]);
      double sum = 0;
      for (int64_t j = 0; j < len; ++j) {
        T e = std::exp(xv[static_cast<size_t>(base + j * inner)] - mx);
        ov[static_cast<size_t>(base + j * inner)] = e;
        sum += e;
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (int64_t j = 0; j < len; ++j) ov[static_cast<size_t>(base + j * inner)] *= inv;
    }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [outer, inner, len](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * len * inner + i;
          double dot = 0;
          for (int64_t j = 0; j < len; ++j) {
            const size_t k = static_cast<size_t>(base + j * inner);
            dot += self.grad[k] * self.value[k];
          }
          for (int64_t j = 0; j < len; ++j) {
            const size_t k = static_cast<size_t>(base + j * inner);
            p.grad[k] += self.value[k] * (self.grad[k] - static_cast<T>(dot));
          }
        }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Data movement: reshape / permute / reverse / concat / narrow / tiling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: element count mismatch, " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = detail::make_node<T>("reshape", std::move(shape));
  out->value = x.values();
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: spec length != rank");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int a : perm) {
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) throw ShapeError("permute: spec is not a permutation");
    seen[static_cast<size_t>(a)] = true;
  }
  Shape oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  auto out = detail::make_node<T>("permute", oshape);
  const Shape in_str = strides_of(x.shape());
  const Shape out_str = strides_of(oshape);
  // in_stride_for_out_axis[i] = stride of the source axis that out axis i reads.
  std::vector<int64_t> src_str(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) src_str[static_cast<size_t>(i)] = in_str[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const auto& xv = x.values();
  auto& ov = out->value;
  const int64_t n = x.size();
  for (int64_t of = 0; of < n; ++of) {
    int64_t rem = of, inf = 0;
    for (int i = 0; i < r; ++i) {
      const int64_t idx = rem / out_str[static_cast<size_t>(i)];
      rem %= out_str[static_cast<size_t>(i)];
      inf += idx * src_str[static_cast<size_t>(i)];
    }
    ov[static_cast<size_t>(of)] = xv[static_cast<size_t>(inf)];
  }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [out_str, src_str, r, n](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t of = 0; of < n; ++of) {
        int64_t rem = of, inf = 0;
        for (int i = 0; i < r; ++i) {
          const int64_t idx = rem / out_str[static_cast<size_t>(i)];
          rem %= out_str[static_cast<size_t>(i)];
          inf += idx * src_str[static_cast<size_t>(i)];
        }
        p.grad[static_cast<size_t>(inf)] += self.grad[static_cast<size_t>(of)];
      }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> reverse_axis(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("reverse_axis: axis out of range");
  const auto& sh = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= sh[static_cast<size_t>(i)];
  const int64_t len = sh[static_cast<size_t>(axis)];
  auto out = detail::make_node<T>("reverse_axis", sh);
  const auto& xv = x.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j) {
      const T* src = xv.data() + (o * len + j) * inner;
      T* dst = out->value.data() + (o * len + (len - 1 - j)) * inner;
      std::copy(src, src + inner, dst);
    }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [outer, inner, len](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j) {
          const T* src = self.grad.data() + (o * len + (len - 1 - j)) * inner;
          T* dst = p.grad.data() + (o * len + j) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.rank() != b.rank()) throw ShapeError("concat: rank mismatch");
  if (axis < 0 || axis >= a.rank()) throw ShapeError("concat: axis out of range");
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ShapeError("concat: extent mismatch on dim " + std::to_string(i) + ": " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  Shape oshape = a.shape();
  oshape[static_cast<size_t>(axis)] += b.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const int64_t la = a.dim(axis) * inner, lb = b.dim(axis) * inner;
  auto out = detail::make_node<T>("concat", oshape);
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(a.data() + o * la, a.data() + (o + 1) * la, out->value.data() + o * (la + lb));
    std::copy(b.data() + o * lb, b.data() + (o + 1) * lb, out->value.data() + o * (la + lb) + la);
  }
  detail::wire(out, {a.node(), b.node()});
  if (out->needs_grad)
    out->backprop = [outer, la, lb](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.needs_grad) {
        pa.ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * (la + lb);
          T* dst = pa.grad.data() + o * la;
          for (int64_t i = 0; i < la; ++i) dst[i] += src[i];
        }
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * (la + lb) + la;
          T* dst = pb.grad.data() + o * lb;
          for (int64_t i = 0; i < lb; ++i) dst[i] += src[i];
        }
      }
    };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("narrow: axis out of range");
  if (start < 0 || len < 1 || start + len > x.dim(axis)) throw ShapeError("narrow: window out of bounds");
  Shape oshape = x.shape();
  oshape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int64_t lin = x.dim(axis) * inner, lout = len * inner, off = start * inner;
  auto out = detail::make_node<T>("narrow", oshape);
  for (int64_t o = 0; o < outer; ++o)
    std::copy(x.data() + o * lin + off, x.data() + o * lin + off + lout, out->value.data() + o * lout);
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [outer, lin, lout, off](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * lout;
        T* dst = p.grad.data() + o * lin + off;
        for (int64_t i = 0; i < lout; ++i) dst[i] += src[i];
      }
    };
  return Tensor<T>(out);
}

/// Nearest-neighbor spatial upsampling of a [B,C,D,H,W] tensor by an integer
/// factor on all three spatial axes.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int64_t factor) {
  if (x.rank() != 5) throw ShapeError("upsample_nearest: input must be [B,C,D,H,W]");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const int64_t BC = x.dim(0) * x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t Do = D * factor, Ho = H * factor, Wo = W * factor;
  auto out = detail::make_node<T>("upsample_nearest", {x.dim(0), x.dim(1), Do, Ho, Wo});
  const auto& xv = x.values();
  for (int64_t g = 0; g < BC; ++g)
    for (int64_t d = 0; d < Do; ++d)
      for (int64_t h = 0; h < Ho; ++h) {
        const T* src = xv.data() + ((g * D + d / factor) * H + h / factor) * W;
        T* dst = out->value.data() + ((g * Do + d) * Ho + h) * Wo;
        for (int64_t w = 0; w < Wo; ++w) dst[w] = src[w / factor];
      }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [BC, D, H, W, factor](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      const int64_t Do = D * factor, Ho = H * factor, Wo = W * factor;
      for (int64_t g = 0; g < BC; ++g)
        for (int64_t d = 0; d < Do; ++d)
          for (int64_t h = 0; h < Ho; ++h) {
            const T* src = self.grad.data() + ((g * Do + d) * Ho + h) * Wo;
            T* dst = p.grad.data() + ((g * D + d / factor) * H + h / factor) * W;
            for (int64_t w = 0; w < Wo; ++w) dst[w / factor] += src[w];
          }
    };
  return Tensor<T>(out);
}

/// Tiles a [B,1,D,H,W] map across C channels (explicit broadcast).
template <typename T>
Tensor<T> broadcast_channel(const Tensor<T>& x, int64_t channels) {
  if (x.rank() != 5 || x.dim(1) != 1)
    throw ShapeError("broadcast_channel: input must be [B,1,D,H,W], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), sp = x.dim(2) * x.dim(3) * x.dim(4);
  auto out = detail::make_node<T>("broadcast_channel", {B, channels, x.dim(2), x.dim(3), x.dim(4)});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < channels; ++c)
      std::copy(x.data() + b * sp, x.data() + (b + 1) * sp, out->value.data() + (b * channels + c) * sp);
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [B, channels, sp](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < channels; ++c) {
          const T* src = self.grad.data() + (b * channels + c) * sp;
          T* dst = p.grad.data() + b * sp;
          for (int64_t i = 0; i < sp; ++i) dst[i] += src[i];
        }
    };
  return Tensor<T>(out);
}

/// Tiles a [B,C] vector across D,H,W (explicit broadcast).
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, int64_t D, int64_t H, int64_t W) {
  if (x.rank() != 2) throw ShapeError("broadcast_spatial: input must be [B,C], got " + shape_str(x.shape()));
  const int64_t BC = x.size(), sp = D * H * W;
  auto out = detail::make_node<T>("broadcast_spatial", {x.dim(0), x.dim(1), D, H, W});
  for (int64_t g = 0; g < BC; ++g) {
    T v = x.values()[static_cast<size_t>(g)];
    T* dst = out->value.data() + g * sp;
    for (int64_t i = 0; i < sp; ++i) dst[i] = v;
  }
  detail::wire(out, {x.node()});
  if (out->needs_grad)
    out->backprop = [BC, sp](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.needs_grad) return;
      p.ensure_grad();
      for (int64_t g = 0; g < BC; ++g) {
        const T* src = self.grad.data() + g * sp;
        double s = 0;
        for (int64_t i = 0; i < sp; ++i) s += src[i];
        p.grad[static_cast<size_t>(g)] += static_cast<T>(s);
      }
    };
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Sequence primitives for the depth state-space path
// ---------------------------------------------------------------------------

/// Per-channel causal 1-D convolution along the middle axis of [N,T,E];
/// pads k-1 zeros on the left so position t sees only t' <= t.
template <typename T>
Tensor<T> depthwise_causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel) {
  if (x.rank() != 3) throw ShapeError("depthwise_causal_conv1d: input must be [N,T,E]");
  if (kernel.rank() != 2 || kernel.dim(0) != x.dim(2))
    throw ShapeError("depthwise_causal_conv1d: kernel must be [E,k] with E=" + std::to_string(x.dim(2)));
  const int64_t N = x.dim(0), Tn = x.dim(1), E = x.dim(2), k = kernel.dim(1);
  auto out = detail::make_node<T>("depthwise_causal_conv1d", x.shape());
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t t = 0; t < Tn; ++t) {
      T* y = out->value.data() + (n * Tn + t) * E;
      for (int64_t j = 0; j < k; ++j) {
        const int64_t tp = t - (k - 1) + j;
        if (tp < 0) continue;
        const T* xr = xv.data() + (n * Tn + tp) * E;
        for (int64_t e = 0; e < E; ++e) y[e] += kv[static_cast<size_t>(e * k + j)] * xr[e];
      }
    }
  detail::wire(out, {x.node(), kernel.node()});
  if (out->needs_grad)
    out->backprop = [N, Tn, E, k](detail::Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pk = *self.parents[1];
      if (px.needs_grad) px.ensure_grad();
      if (pk.needs_grad) pk.ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t t = 0; t < Tn; ++t) {
          const T* gy = self.grad.data() + (n * Tn + t) * E;
          for (int64_t j = 0; j < k; ++j) {
            const int64_t tp = t - (k - 1) + j;
            if (tp < 0) continue;
            if (px.needs_grad) {
              T* gx = px.grad.data() + (n * Tn + tp) * E;
              for (int64_t e = 0; e < E; ++e) gx[e] += pk.value[static_cast<size_t>(e * k + j)] * gy[e];
            }
            if (pk.needs_grad) {
              const T* xr = px.value.data() + (n * Tn + tp) * E;
              for (int64_t e = 0; e < E; ++e) pk.grad[static_cast<size_t>(e * k + j)] += xr[e] * gy[e];
            }
          }
        }
    };
  return Tensor<T>(out);
}

/// Selective-scan recurrence. Per sequence n, channel e, state s:
///   h_t = exp(delta_t[e] * A[e,s]) * h_{t-1} + delta_t[e] * B_t[s] * u_t[e]
///   y_t[e] = sum_s C_t[s] * h_t[e,s] + D_skip[e] * u_t[e]
/// Single left-to-right pass; O(T*E*S) time, O(E*S) live state.
template <typename T>
Tensor<T> scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b_seq, const Tensor<T>& c_seq,
                    const Tensor<T>& a, const Tensor<T>& d_skip) {
  if (u.rank() != 3) throw ShapeError("scan_core: u must be [N,T,E]");
  const int64_t N = u.dim(0), Tn = u.dim(1), E = u.dim(2);
  if (delta.shape() != u.shape()) throw ShapeError("scan_core: delta shape mismatch");
  if (b_seq.rank() != 3 || b_seq.dim(0) != N || b_seq.dim(1) != Tn) throw ShapeError("scan_core: B shape mismatch");
  const int64_t S = b_seq.dim(2);
  if (c_seq.shape() != b_seq.shape()) throw ShapeError("scan_core: C shape mismatch");
  if (a.rank() != 2 || a.dim(0) != E || a.dim(1) != S) throw ShapeError("scan_core: A must be [E,S]");
  if (d_skip.size() != E) throw ShapeError("scan_core: D_skip must be [E]");

  auto out = detail::make_node<T>("scan_core", u.shape());
  detail::wire(out, {u.node(), delta.node(), b_seq.node(), c_seq.node(), a.node(), d_skip.node()});
  const bool save = out->needs_grad;

  const auto& uv = u.values();
  const auto& dv = delta.values();
  const auto& bv = b_seq.values();
  const auto& cv = c_seq.values();
  const auto& av = a.values();
  const auto& Dv = d_skip.values();

  std::vector<T> hist;  // h after each step, [N,T,E,S], only when grads flow
  if (save) hist.resize(static_cast<size_t>(N * Tn * E * S));
  std::vector<T> h(static_cast<size_t>(E * S));
  for (int64_t n = 0; n < N; ++n) {
    std::fill(h.begin(), h.end(), T(0));
    for (int64_t t = 0; t < Tn; ++t) {
      const int64_t row = n * Tn + t;
      const T* ut = uv.data() + row * E;
      const T* dt = dv.data() + row * E;
      const T* bt = bv.data() + row * S;
      const T* ct = cv.data() + row * S;
      T* yt = out->value.data() + row * E;
      for (int64_t e = 0; e < E; ++e) {
        const T de = dt[e], xe = ut[e];
        T* he = h.data() + e * S;
        const T* ae = av.data() + e * S;
        T acc = 0;
        for (int64_t s = 0; s < S; ++s) {
          const T decay = std::exp(de * ae[s]);
          he[s] = decay * he[s] + de * bt[s] * xe;
          acc += ct[s] * he[s];
        }
        yt[e] = acc + Dv[static_cast<size_t>(e)] * xe;
      }
      if (save) std::copy(h.begin(), h.end(), hist.begin() + static_cast<size_t>(row * E * S));
    }
  }

  if (save)
    out->backprop = [N, Tn, E, S, hist = std::move(hist)](detail::Node<T>& self) {
      auto& pu = *self.parents[0];
      auto& pd = *self.parents[1];
      auto& pb = *self.parents[2];
      auto& pc = *self.parents[3];
      auto& pa = *self.parents[4];
      auto& pD = *self.parents[5];
      for (auto* p : {&pu, &pd, &pb, &pc, &pa, &pD})
        if (p->needs_grad) p->ensure_grad();
      const auto& uv = pu.value;
      const auto& dv = pd.value;
      const auto& bv = pb.value;
      const auto& cv = pc.value;
      const auto& av = pa.value;
      const auto& Dv = pD.value;
      std::vector<T> gh(static_cast<size_t>(E * S));
      for (int64_t n = 0; n < N; ++n) {
        std::fill(gh.begin(), gh.end(), T(0));
        for (int64_t t = Tn - 1; t >= 0; --t) {
          const int64_t row = n * Tn + t;
          const T* ut = uv.data() + row * E;
          const T* dt = dv.data() + row * E;
          const T* bt = bv.data() + row * S;
          const T* ct = cv.data() + row * S;
          const T* gy = self.grad.data() + row * E;
          const T* ht = hist.data() + row * E * S;
          const T* hprev = t > 0 ? hist.data() + (row - 1) * E * S : nullptr;
          for (int64_t e = 0; e < E; ++e) {
            const T de = dt[e], xe = ut[e], gye = gy[e];
            const T* ae = av.data() + e * S;
            T* ghe = gh.data() + e * S;
            if (pD.needs_grad) pD.grad[static_cast<size_t>(e)] += gye * xe;
            T gu_e = Dv[static_cast<size_t>(e)] * gye;
            T gd_e = 0;
            for (int64_t s = 0; s < S; ++s) {
              const T hts = ht[e * S + s];
              if (pc.needs_grad) pc.grad[static_cast<size_t>(row * S + s)] += gye * hts;
              const T ghes = ghe[s] + ct[s] * gye;
              const T decay = std::exp(de * ae[s]);
              const T hp = hprev ? hprev[e * S + s] : T(0);
              if (pa.needs_grad) pa.grad[static_cast<size_t>(e * S + s)] += ghes * de * decay * hp;
              gd_e += ghes * (ae[s] * decay * hp + bt[s] * xe);
              if (pb.needs_grad) pb.grad[static_cast<size_t>(row * S + s)] += ghes * de * xe;
              gu_e += ghes * de * bt[s];
              ghe[s] = ghes * decay;
            }
            if (pd.needs_grad) pd.grad[static_cast<size_t>(row * E + e)] += gd_e;
            if (pu.needs_grad) pu.grad[static_cast<size_t>(row * E + e)] += gu_e;
          }
        }
      }
    };
  return Tensor<T>(out);
}

}  // namespace vseg

#endif  // VSEG_OPS_HPP
