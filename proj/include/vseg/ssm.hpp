#ifndef VSEG_SSM_HPP
#define VSEG_SSM_HPP

#include <optional>

#include "vseg/ops.hpp"

// Bidirectional depth state-space block: depth-axis sequence construction,
// selective scan, bidirectional fusion with a shared parameter set, residual
// add, and a pre-normalized channel-mixing MLP.

namespace vseg {

/// Core parameters of one selective-scan (S6-style) block.
/// A = -exp(a_log) keeps the recurrence strictly decaying; delta passes
/// through softplus so it is positive for every input.
template <typename T>
struct SSMParams {
  int64_t channels = 0;     // C
  int64_t inner_dim = 0;    // E = expand * C
  int64_t state_size = 0;   // S
  int64_t conv_kernel = 0;  // k_c

  Tensor<T> in_proj;     // [2E, C]; rows [0,E) signal branch, [E,2E) gate branch
  Tensor<T> depth_conv;  // [E, k_c], causal over the sequence axis
  Tensor<T> a_log;       // [E, S]
  Tensor<T> d_skip;      // [E]
  Tensor<T> delta_w;     // [E, E]
  Tensor<T> delta_b;     // [E]
  Tensor<T> b_w;         // [S, E]
  Tensor<T> c_w;         // [S, E]
  Tensor<T> out_proj;    // [C, E]
};

struct SsmConfig {
  int64_t state_size = 8;
  int64_t expand = 2;
  int64_t mlp_ratio = 2;
  int64_t conv_kernel = 3;
};

template <typename T>
struct BiMParams {
  SSMParams<T> ssm;  // shared by both directions
  std::optional<SSMParams<T>> ssm_reverse;  // only when directions are unshared
  Tensor<T> norm_gain, norm_shift;          // [C]
  Tensor<T> mlp_w1;                         // [r*C, C, 1,1,1]
  Tensor<T> mlp_w2;                         // [C, r*C, 1,1,1]
  int64_t mlp_ratio = 2;
  double norm_eps = 1e-5;
  bool bare_scan = false;  // use the raw scan instead of the full block
};

namespace detail {

template <typename T>
Tensor<T> uniform_init(Shape shape, int64_t fan_in, CounterRng& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(static_cast<size_t>(numel(shape)));
  for (auto& e : v) e = static_cast<T>(rng.uniform(-b, b));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace detail

/// Identity-at-init scheme: out_proj starts at zero so the block initially
/// passes features through untouched; a_log = ln(s+1); softplus(delta_b) ~ 0.05.
template <typename T>
SSMParams<T> ssm_init(int64_t channels, const SsmConfig& cfg, CounterRng& rng, bool bare_scan = false) {
  SSMParams<T> p;
  p.channels = channels;
  p.inner_dim = bare_scan ? channels : cfg.expand * channels;
  p.state_size = cfg.state_size;
  p.conv_kernel = cfg.conv_kernel;
  const int64_t E = p.inner_dim, S = p.state_size;

  p.in_proj = detail::uniform_init<T>({2 * E, channels}, channels, rng);
  p.depth_conv = detail::uniform_init<T>({E, cfg.conv_kernel}, cfg.conv_kernel, rng);
  {
    std::vector<T> v(static_cast<size_t>(E * S));
    for (int64_t e = 0; e < E; ++e)
      for (int64_t s = 0; s < S; ++s) v[static_cast<size_t>(e * S + s)] = static_cast<T>(std::log(double(s + 1)));
    p.a_log = Tensor<T>::from({E, S}, std::move(v));
  }
  p.d_skip = Tensor<T>::full({E}, T(1));
  p.delta_w = detail::uniform_init<T>({E, E}, E, rng);
  // softplus(delta_b) ~ 0.05
  p.delta_b = Tensor<T>::full({E}, static_cast<T>(std::log(std::exp(0.05) - 1.0)));
  p.b_w = detail::uniform_init<T>({S, E}, E, rng);
  p.c_w = detail::uniform_init<T>({S, E}, E, rng);
  p.out_proj = Tensor<T>::zeros({channels, E});
  return p;
}

template <typename T>
BiMParams<T> bim_init(int64_t channels, const SsmConfig& cfg, CounterRng& rng, bool shared_directions = true,
                      bool bare_scan = false) {
  BiMParams<T> p;
  p.bare_scan = bare_scan;
  p.mlp_ratio = cfg.mlp_ratio;
  p.ssm = ssm_init<T>(channels, cfg, rng, bare_scan);
  if (!shared_directions) p.ssm_reverse = ssm_init<T>(channels, cfg, rng, bare_scan);
  p.norm_gain = Tensor<T>::full({channels}, T(1));
  p.norm_shift = Tensor<T>::zeros({channels});
  p.mlp_w1 = detail::uniform_init<T>({cfg.mlp_ratio * channels, channels, 1, 1, 1}, channels, rng);
  p.mlp_w2 = Tensor<T>::zeros({channels, cfg.mlp_ratio * channels, 1, 1, 1});
  return p;
}

/// [B,C,D,H,W] -> [B*H*W, D, C]; sequence s = b*(H*W) + h*W + w, and
/// element (s,d,c) equals x[b,c,d,h,w].
template <typename T>
Tensor<T> make_depth_sequences(const Tensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("make_depth_sequences: input must be [B,C,D,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  return reshape(permute(x, {0, 3, 4, 2, 1}), {B * H * W, D, C});
}

/// Exact inverse of make_depth_sequences.
template <typename T>
Tensor<T> inverse_depth_sequences(const Tensor<T>& z, int64_t B, int64_t C, int64_t D, int64_t H, int64_t W) {
  if (z.rank() != 3 || z.dim(0) != B * H * W || z.dim(1) != D || z.dim(2) != C)
    throw ShapeError("inverse_depth_sequences: sequence tensor has shape " + shape_str(z.shape()));
  return permute(reshape(z, {B, H, W, D, C}), {0, 4, 3, 1, 2});
}

/// Input-dependent selective scan over [N,T,E] sequences:
/// delta = softplus(delta_w x + delta_b), B_t = b_w x, C_t = c_w x,
/// then the scan_core recurrence with A = -exp(a_log).
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& seq, const SSMParams<T>& p) {
  if (seq.rank() != 3 || seq.dim(2) != p.inner_dim)
    throw ShapeError("selective_scan: expected [N,T," + std::to_string(p.inner_dim) + "], got " +
                     shape_str(seq.shape()));
  Tensor<T> delta = softplus(linear(seq, p.delta_w, p.delta_b));
  Tensor<T> bt = linear(seq, p.b_w);
  Tensor<T> ct = linear(seq, p.c_w);
  Tensor<T> a = negate(exp(p.a_log));
  return scan_core(seq, delta, bt, ct, a, p.d_skip);
}

/// Full block: gated in-projection, causal depthwise conv + SiLU, selective
/// scan, gate, out-projection. [N,T,C] -> [N,T,C].
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& seq, const SSMParams<T>& p) {
  if (seq.rank() != 3 || seq.dim(2) != p.channels)
    throw ShapeError("mamba_block: expected [N,T," + std::to_string(p.channels) + "], got " +
                     shape_str(seq.shape()));
  Tensor<T> uv = linear(seq, p.in_proj);
  Tensor<T> u = narrow(uv, 2, 0, p.inner_dim);
  Tensor<T> g = narrow(uv, 2, p.inner_dim, p.inner_dim);
  u = silu(depthwise_causal_conv1d(u, p.depth_conv));
  Tensor<T> y = selective_scan(u, p);
  return linear(mul(y, silu(g)), p.out_proj);
}

namespace detail {

template <typename T>
Tensor<T> ssm_apply(const Tensor<T>& seq, const SSMParams<T>& p, bool bare_scan) {
  return bare_scan ? selective_scan(seq, p) : mamba_block(seq, p);
}

}  // namespace detail

/// Bidirectional fusion along the depth axis: z = M(x~) + Rev(M(Rev(x~))).
template <typename T>
Tensor<T> bim_depth_fusion(const Tensor<T>& seq, const BiMParams<T>& p) {
  Tensor<T> zf = detail::ssm_apply(seq, p.ssm, p.bare_scan);
  const SSMParams<T>& rev = p.ssm_reverse ? *p.ssm_reverse : p.ssm;
  Tensor<T> zb = reverse_axis(detail::ssm_apply(reverse_axis(seq, 1), rev, p.bare_scan), 1);
  return add(zf, zb);
}

/// The full block on [B,C,D,H,W]:
///   x1 = x + inverse(z),  x' = x1 + W2 silu(W1 Norm(x1))
/// Output shape equals input shape.
template <typename T>
Tensor<T> bim_forward(const Tensor<T>& x, const BiMParams<T>& p) {
  if (x.rank() != 5) throw ShapeError("bim_forward: input must be [B,C,D,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (C != p.ssm.channels)
    throw ShapeError("bim_forward: input has " + std::to_string(C) + " channels, block expects " +
                     std::to_string(p.ssm.channels));
  Tensor<T> seq = make_depth_sequences(x);
  Tensor<T> z = bim_depth_fusion(seq, p);
  Tensor<T> x1 = add(x, inverse_depth_sequences(z, B, C, D, H, W));
  Tensor<T> h = layer_norm_channels(x1, p.norm_eps, p.norm_gain, p.norm_shift);
  h = conv3d(h, p.mlp_w1);
  h = silu(h);
  h = conv3d(h, p.mlp_w2);
  return add(x1, h);
}

}  // namespace vseg

#endif  // VSEG_SSM_HPP
