#ifndef VSEG_GEO_ATTN_HPP
#define VSEG_GEO_ATTN_HPP

#include "vseg/ops.hpp"
#include "vseg/ssm.hpp"

// Geometry-aware vessel attention: three plane-aligned anisotropic branches
// plus a standard 3D branch, 1x1x1 fusion, a residual spatial gate, and
// dual-pooled channel attention.

namespace vseg {

template <typename T>
struct GeoAttnParams {
  int64_t channels = 0;  // C, divisible by 4
  int64_t cb = 0;        // branch width C/4
  int64_t c_r = 0;       // spatial bottleneck width
  int64_t c_hidden = 0;  // channel-MLP hidden width

  Tensor<T> k_xy, b_xy;  // [Cb,C,1,3,3]
  Tensor<T> k_yz, b_yz;  // [Cb,C,3,1,3]
  Tensor<T> k_xz, b_xz;  // [Cb,C,3,3,1]
  Tensor<T> k_3d, b_3d;  // [Cb,C,3,3,3]
  Tensor<T> fuse_w, fuse_b;            // [C,4Cb,1,1,1]
  Tensor<T> sp_reduce_w, sp_reduce_b;  // [Cr,C,1,1,1]
  Tensor<T> sp_expand_w, sp_expand_b;  // [1,Cr,1,1,1]
  Tensor<T> gamma;                     // scalar
  Tensor<T> ch_w1;                     // [hidden,C], no bias
  Tensor<T> ch_w2;                     // [C,hidden], no bias
  double norm_eps = 1e-5;
};

/// gamma starts at zero so the spatial gate is initially the identity.
template <typename T>
GeoAttnParams<T> geo_init(int64_t channels, CounterRng& rng) {
  if (channels % 4 != 0)
    throw ConfigError("geo_attn: channel count " + std::to_string(channels) + " must be divisible by 4");
  GeoAttnParams<T> p;
  p.channels = channels;
  p.cb = channels / 4;
  p.c_r = std::max<int64_t>(channels / 8, 4);
  p.c_hidden = std::max<int64_t>(channels / 8, 1);

  auto conv_w = [&](Shape s) {
    int64_t fan = s[1] * s[2] * s[3] * s[4];
    return detail::uniform_init<T>(std::move(s), fan, rng);
  };
  p.k_xy = conv_w({p.cb, channels, 1, 3, 3});
  p.b_xy = Tensor<T>::zeros({p.cb});
  p.k_yz = conv_w({p.cb, channels, 3, 1, 3});
  p.b_yz = Tensor<T>::zeros({p.cb});
  p.k_xz = conv_w({p.cb, channels, 3, 3, 1});
  p.b_xz = Tensor<T>::zeros({p.cb});
  p.k_3d = conv_w({p.cb, channels, 3, 3, 3});
  p.b_3d = Tensor<T>::zeros({p.cb});
  p.fuse_w = conv_w({channels, 4 * p.cb, 1, 1, 1});
  p.fuse_b = Tensor<T>::zeros({channels});
  p.sp_reduce_w = conv_w({p.c_r, channels, 1, 1, 1});
  p.sp_reduce_b = Tensor<T>::zeros({p.c_r});
  p.sp_expand_w = conv_w({1, p.c_r, 1, 1, 1});
  p.sp_expand_b = Tensor<T>::zeros({1});
  p.gamma = Tensor<T>::zeros({1});
  p.ch_w1 = detail::uniform_init<T>({p.c_hidden, channels}, channels, rng);
  p.ch_w2 = detail::uniform_init<T>({channels, p.c_hidden}, p.c_hidden, rng);
  return p;
}

/// Four branches, concatenated in the order (xy, yz, xz, 3d), fused to C
/// channels by a pointwise conv. All branches preserve the spatial extents.
template <typename T>
Tensor<T> aniso_fuse(const Tensor<T>& x, const GeoAttnParams<T>& p) {
  Tensor<T> fxy = conv3d(x, p.k_xy, p.b_xy);
  Tensor<T> fyz = conv3d(x, p.k_yz, p.b_yz);
  Tensor<T> fxz = conv3d(x, p.k_xz, p.b_xz);
  Tensor<T> f3d = conv3d(x, p.k_3d, p.b_3d);
  Tensor<T> cat = concat(concat(fxy, fyz, 1), concat(fxz, f3d, 1), 1);
  return conv3d(cat, p.fuse_w, p.fuse_b);
}

template <typename T>
struct SpatialGateResult {
  Tensor<T> x_s;  // gated features
  Tensor<T> a;    // attention map [B,1,D,H,W], every element in (0,1)
};

/// A = sigmoid(expand(relu(IN(reduce(F))))); X_s = X * (1 + gamma * A).
/// gamma == 0 makes this exactly the identity on X.
template <typename T>
SpatialGateResult<T> spatial_gate(const Tensor<T>& x, const Tensor<T>& f, const GeoAttnParams<T>& p) {
  if (x.shape() != f.shape())
    throw ShapeError("spatial_gate: X " + shape_str(x.shape()) + " and F " + shape_str(f.shape()) + " differ");
  Tensor<T> a = conv3d(f, p.sp_reduce_w, p.sp_reduce_b);
  a = relu(instance_norm(a, p.norm_eps));
  a = sigmoid(conv3d(a, p.sp_expand_w, p.sp_expand_b));
  Tensor<T> gate = add_const(mul(p.gamma, a), 1.0);
  Tensor<T> xs = mul(x, broadcast_channel(gate, x.dim(1)));
  return {xs, a};
}

/// W = sigmoid(MLP(GAP(X_s)) + MLP(GMP(X_s))) with one shared bias-free MLP.
template <typename T>
Tensor<T> channel_weights(const Tensor<T>& xs, const GeoAttnParams<T>& p) {
  Tensor<T> gap = reduce_mean(xs, {2, 3, 4});
  Tensor<T> gmp = reduce_max(xs, {2, 3, 4});
  Tensor<T> ma = linear(relu(linear(gap, p.ch_w1)), p.ch_w2);
  Tensor<T> mm = linear(relu(linear(gmp, p.ch_w1)), p.ch_w2);
  return sigmoid(add(ma, mm));
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& xs, const GeoAttnParams<T>& p) {
  Tensor<T> w = channel_weights(xs, p);
  return mul(xs, broadcast_spatial(w, xs.dim(2), xs.dim(3), xs.dim(4)));
}

template <typename T>
Tensor<T> geo_attn_forward(const Tensor<T>& x, const GeoAttnParams<T>& p) {
  if (x.rank() != 5) throw ShapeError("geo_attn_forward: input must be [B,C,D,H,W]");
  if (x.dim(1) != p.channels)
    throw ShapeError("geo_attn_forward: input has " + std::to_string(x.dim(1)) + " channels, module expects " +
                     std::to_string(p.channels));
  Tensor<T> f = aniso_fuse(x, p);
  auto gate = spatial_gate(x, f, p);
  return channel_attention(gate.x_s, p);
}

}  // namespace vseg

#endif  // VSEG_GEO_ATTN_HPP
