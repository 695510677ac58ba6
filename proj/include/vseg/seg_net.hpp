#ifndef VSEG_SEG_NET_HPP
#define VSEG_SEG_NET_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vseg/geo_attn.hpp"
#include "vseg/loss_metrics.hpp"
#include "vseg/ops.hpp"
#include "vseg/ssm.hpp"

// Compact 3-level encoder-decoder with the BiM -> GeoAttn cascade at the
// bottleneck. Each level runs two conv+IN+relu blocks; levels are bridged by
// stride-2 convs down and nearest-neighbor upsampling plus a pointwise conv
// up, with skip concatenation.

namespace vseg {

struct ModelConfig {
  int64_t in_channels = 1;
  int64_t num_classes = 2;
  int64_t base_width = 16;
  int64_t levels = 3;
  bool use_bim = true;
  bool use_geoattn = true;
  bool deep_supervision = true;
  SsmConfig ssm;

  int64_t bottleneck_width() const { return base_width << (levels - 1); }
  int64_t downsample_factor() const { return int64_t{1} << (levels - 1); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2, got " + std::to_string(num_classes));
    if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
    if (base_width < 1) throw ConfigError("model: base_width must be >= 1");
    if (levels < 1) throw ConfigError("model: levels must be >= 1");
    if (use_geoattn && bottleneck_width() % 4 != 0)
      throw ConfigError("model: bottleneck width " + std::to_string(bottleneck_width()) +
                        " must be divisible by 4 when use_geoattn is set");
    if (ssm.state_size < 1 || ssm.expand < 1 || ssm.mlp_ratio < 1 || ssm.conv_kernel < 1)
      throw ConfigError("model: ssm defaults must be positive");
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> w, b;
};

template <typename T>
struct SegModel {
  ModelConfig cfg;
  uint64_t seed = 0;
  std::vector<ConvLayer<T>> enc_c1, enc_c2;  // per level
  std::vector<ConvLayer<T>> down;            // levels-1
  std::optional<BiMParams<T>> bim;
  std::optional<GeoAttnParams<T>> geo;
  std::vector<ConvLayer<T>> up;              // levels-1; stage i maps level i+1 -> i
  std::vector<ConvLayer<T>> dec_c1, dec_c2;  // levels-1
  std::vector<ConvLayer<T>> heads;           // full-res first, then coarser
  std::vector<std::pair<std::string, Tensor<T>>> params;

  Tensor<T>* find_param(const std::string& name) {
    for (auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
ConvLayer<T> conv_layer(int64_t cout, int64_t cin, int64_t kd, int64_t kh, int64_t kw, CounterRng& rng) {
  ConvLayer<T> l;
  l.w = uniform_init<T>({cout, cin, kd, kh, kw}, cin * kd * kh * kw, rng);
  l.b = Tensor<T>::zeros({cout});
  return l;
}

template <typename T>
void reg(SegModel<T>& m, const std::string& name, const Tensor<T>& t) {
  Tensor<T> h = t;
  h.set_requires_grad(true);
  h.set_name(name);
  m.params.emplace_back(name, h);
}

template <typename T>
void reg_conv(SegModel<T>& m, const std::string& prefix, ConvLayer<T>& l) {
  reg(m, prefix + ".w", l.w);
  reg(m, prefix + ".b", l.b);
}

template <typename T>
void reg_bim(SegModel<T>& m, BiMParams<T>& p) {
  reg(m, "bim.in_proj", p.ssm.in_proj);
  reg(m, "bim.depth_conv", p.ssm.depth_conv);
  reg(m, "bim.a_log", p.ssm.a_log);
  reg(m, "bim.d_skip", p.ssm.d_skip);
  reg(m, "bim.delta_w", p.ssm.delta_w);
  reg(m, "bim.delta_b", p.ssm.delta_b);
  reg(m, "bim.b_w", p.ssm.b_w);
  reg(m, "bim.c_w", p.ssm.c_w);
  reg(m, "bim.out_proj", p.ssm.out_proj);
  reg(m, "bim.norm_gain", p.norm_gain);
  reg(m, "bim.norm_shift", p.norm_shift);
  reg(m, "bim.mlp_w1", p.mlp_w1);
  reg(m, "bim.mlp_w2", p.mlp_w2);
}

template <typename T>
void reg_geo(SegModel<T>& m, GeoAttnParams<T>& p) {
  reg(m, "geo.k_xy", p.k_xy);
  reg(m, "geo.b_xy", p.b_xy);
  reg(m, "geo.k_yz", p.k_yz);
  reg(m, "geo.b_yz", p.b_yz);
  reg(m, "geo.k_xz", p.k_xz);
  reg(m, "geo.b_xz", p.b_xz);
  reg(m, "geo.k_3d", p.k_3d);
  reg(m, "geo.b_3d", p.b_3d);
  reg(m, "geo.fuse_w", p.fuse_w);
  reg(m, "geo.fuse_b", p.fuse_b);
  reg(m, "geo.sp_reduce_w", p.sp_reduce_w);
  reg(m, "geo.sp_reduce_b", p.sp_reduce_b);
  reg(m, "geo.sp_expand_w", p.sp_expand_w);
  reg(m, "geo.sp_expand_b", p.sp_expand_b);
  reg(m, "geo.gamma", p.gamma);
  reg(m, "geo.ch_w1", p.ch_w1);
  reg(m, "geo.ch_w2", p.ch_w2);
}

}  // namespace detail

/// Deterministic build: each component draws from its own seed stream, so
/// toggling use_bim / use_geoattn leaves every other parameter bit-identical.
template <typename T>
SegModel<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  SegModel<T> m;
  m.cfg = cfg;
  m.seed = seed;
  CounterRng rng_enc(seed, 10), rng_dec(seed, 11), rng_heads(seed, 12), rng_bim(seed, 13), rng_geo(seed, 14);

  auto width = [&](int64_t level) { return cfg.base_width << level; };

  for (int64_t l = 0; l < cfg.levels; ++l) {
    const int64_t w = width(l);
    const int64_t cin = l == 0 ? cfg.in_channels : w;
    m.enc_c1.push_back(detail::conv_layer<T>(w, cin, 3, 3, 3, rng_enc));
    m.enc_c2.push_back(detail::conv_layer<T>(w, w, 3, 3, 3, rng_enc));
    if (l + 1 < cfg.levels) m.down.push_back(detail::conv_layer<T>(width(l + 1), w, 3, 3, 3, rng_enc));
  }
  if (cfg.use_bim) m.bim = bim_init<T>(cfg.bottleneck_width(), cfg.ssm, rng_bim);
  if (cfg.use_geoattn) m.geo = geo_init<T>(cfg.bottleneck_width(), rng_geo);
  for (int64_t l = 0; l + 1 < cfg.levels; ++l) {
    const int64_t w = width(l);
    m.up.push_back(detail::conv_layer<T>(w, width(l + 1), 1, 1, 1, rng_dec));
    m.dec_c1.push_back(detail::conv_layer<T>(w, 2 * w, 3, 3, 3, rng_dec));
    m.dec_c2.push_back(detail::conv_layer<T>(w, w, 3, 3, 3, rng_dec));
  }
  const int64_t n_heads = cfg.deep_supervision ? cfg.levels : 1;
  for (int64_t i = 0; i < n_heads; ++i)
    m.heads.push_back(detail::conv_layer<T>(cfg.num_classes, width(i), 1, 1, 1, rng_heads));

  for (int64_t l = 0; l < cfg.levels; ++l) {
    detail::reg_conv(m, "enc" + std::to_string(l) + ".c1", m.enc_c1[static_cast<size_t>(l)]);
    detail::reg_conv(m, "enc" + std::to_string(l) + ".c2", m.enc_c2[static_cast<size_t>(l)]);
    if (l + 1 < cfg.levels) detail::reg_conv(m, "down" + std::to_string(l), m.down[static_cast<size_t>(l)]);
  }
  if (m.bim) detail::reg_bim(m, *m.bim);
  if (m.geo) detail::reg_geo(m, *m.geo);
  for (int64_t l = 0; l + 1 < cfg.levels; ++l) {
    detail::reg_conv(m, "up" + std::to_string(l), m.up[static_cast<size_t>(l)]);
    detail::reg_conv(m, "dec" + std::to_string(l) + ".c1", m.dec_c1[static_cast<size_t>(l)]);
    detail::reg_conv(m, "dec" + std::to_string(l) + ".c2", m.dec_c2[static_cast<size_t>(l)]);
  }
  for (size_t i = 0; i < m.heads.size(); ++i) detail::reg_conv(m, "head" + std::to_string(i), m.heads[i]);
  return m;
}

namespace detail {

template <typename T>
Tensor<T> conv_in_relu(const Tensor<T>& x, const ConvLayer<T>& l, int64_t stride = 1) {
  return relu(instance_norm(conv3d(x, l.w, l.b, stride), 1e-5));
}

}  // namespace detail

/// Returns logits per supervision head, full resolution first, then each
/// coarser decoder level down to the bottleneck (when deep supervision is on).
template <typename T>
std::vector<Tensor<T>> forward(const SegModel<T>& m, const Tensor<T>& patch) {
  if (patch.rank() != 5) throw ShapeError("forward: patch must be [B,C,D,H,W]");
  if (patch.dim(1) != m.cfg.in_channels)
    throw ShapeError("forward: patch has " + std::to_string(patch.dim(1)) + " channels, model expects " +
                     std::to_string(m.cfg.in_channels));
  const int64_t f = m.cfg.downsample_factor();
  for (int ax = 2; ax < 5; ++ax)
    if (patch.dim(ax) % f != 0)
      throw ShapeError("forward: spatial extent " + std::to_string(patch.dim(ax)) + " (dim " + std::to_string(ax) +
                       ") not divisible by " + std::to_string(f));

  const int64_t L = m.cfg.levels;
  std::vector<Tensor<T>> skips;
  Tensor<T> x = patch;
  for (int64_t l = 0; l < L; ++l) {
    x = detail::conv_in_relu(x, m.enc_c1[static_cast<size_t>(l)]);
    x = detail::conv_in_relu(x, m.enc_c2[static_cast<size_t>(l)]);
    if (l + 1 < L) {
      skips.push_back(x);
      x = detail::conv_in_relu(x, m.down[static_cast<size_t>(l)], 2);
    }
  }

  // Bottleneck: BiM carries its own residual structure; GeoAttn output is
  // residually added.
  if (m.bim) x = bim_forward(x, *m.bim);
  if (m.geo) x = add(x, geo_attn_forward(x, *m.geo));

  std::vector<Tensor<T>> level_out(static_cast<size_t>(L));
  level_out[static_cast<size_t>(L - 1)] = x;
  for (int64_t l = L - 2; l >= 0; --l) {
    x = upsample_nearest(x, 2);
    x = detail::conv_in_relu(x, m.up[static_cast<size_t>(l)]);
    x = concat(skips[static_cast<size_t>(l)], x, 1);
    x = detail::conv_in_relu(x, m.dec_c1[static_cast<size_t>(l)]);
    x = detail::conv_in_relu(x, m.dec_c2[static_cast<size_t>(l)]);
    level_out[static_cast<size_t>(l)] = x;
  }

  std::vector<Tensor<T>> logits;
  const int64_t n_heads = static_cast<int64_t>(m.heads.size());
  for (int64_t i = 0; i < n_heads; ++i)
    logits.push_back(conv3d(level_out[static_cast<size_t>(i)], m.heads[static_cast<size_t>(i)].w,
                            m.heads[static_cast<size_t>(i)].b));
  return logits;
}

// ---------------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int64_t> tile_positions(int64_t ext, int64_t patch, int64_t stride) {
  std::vector<int64_t> pos;
  for (int64_t p = 0;; p += stride) {
    if (p + patch >= ext) {
      if (pos.empty() || pos.back() != ext - patch) pos.push_back(ext - patch);
      break;
    }
    pos.push_back(p);
  }
  return pos;
}

}  // namespace detail

/// Averaged per-voxel class probabilities over all tiles; [K,D,H,W].
template <typename T>
Tensor<T> predict_volume_probs(const SegModel<T>& m, const Tensor<T>& volume,
                               const std::array<int64_t, 3>& patch_shape, double overlap) {
  if (overlap < 0.0 || overlap > 0.9) throw ConfigError("predict_volume: overlap must be in [0, 0.9]");
  Tensor<T> vol = volume;
  if (vol.rank() == 5) {
    if (vol.dim(0) != 1 || vol.dim(1) != 1) throw ShapeError("predict_volume: expected [1,1,D,H,W]");
    vol = reshape(vol, {vol.dim(2), vol.dim(3), vol.dim(4)});
  }
  if (vol.rank() != 3) throw ShapeError("predict_volume: expected [D,H,W] or [1,1,D,H,W]");
  NoGradGuard ng;

  const int64_t D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
  const int64_t pd = patch_shape[0], ph = patch_shape[1], pw = patch_shape[2];
  const int64_t Dp = std::max(D, pd), Hp = std::max(H, ph), Wp = std::max(W, pw);

  // Zero-pad on the high side when the volume is smaller than the patch.
  std::vector<T> padded(static_cast<size_t>(Dp * Hp * Wp), T(0));
  for (int64_t d = 0; d < D; ++d)
    for (int64_t h = 0; h < H; ++h)
      std::copy(vol.data() + (d * H + h) * W, vol.data() + (d * H + h) * W + W,
                padded.data() + (d * Hp + h) * Wp);

  auto stride_of = [&](int64_t patch) {
    return std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(patch) * (1.0 - overlap))));
  };
  const auto dpos = detail::tile_positions(Dp, pd, stride_of(pd));
  const auto hpos = detail::tile_positions(Hp, ph, stride_of(ph));
  const auto wpos = detail::tile_positions(Wp, pw, stride_of(pw));

  const int64_t K = m.cfg.num_classes;
  std::vector<double> acc(static_cast<size_t>(K * Dp * Hp * Wp), 0.0);
  std::vector<double> cnt(static_cast<size_t>(Dp * Hp * Wp), 0.0);

  std::vector<T> patch_buf(static_cast<size_t>(pd * ph * pw));
  for (int64_t d0 : dpos)
    for (int64_t h0 : hpos)
      for (int64_t w0 : wpos) {
        for (int64_t d = 0; d < pd; ++d)
          for (int64_t h = 0; h < ph; ++h)
            std::copy(padded.data() + ((d0 + d) * Hp + h0 + h) * Wp + w0,
                      padded.data() + ((d0 + d) * Hp + h0 + h) * Wp + w0 + pw,
                      patch_buf.data() + (d * ph + h) * pw);
        Tensor<T> patch = Tensor<T>::from({1, 1, pd, ph, pw}, patch_buf);
        Tensor<T> prob = softmax(forward(m, patch)[0], 1);  // [1,K,pd,ph,pw]
        const T* pv = prob.data();
        for (int64_t k = 0; k < K; ++k)
          for (int64_t d = 0; d < pd; ++d)
            for (int64_t h = 0; h < ph; ++h) {
              const T* src = pv + ((k * pd + d) * ph + h) * pw;
              double* dst = acc.data() + ((k * Dp + d0 + d) * Hp + h0 + h) * Wp + w0;
              for (int64_t w = 0; w < pw; ++w) dst[w] += src[w];
            }
        for (int64_t d = 0; d < pd; ++d)
          for (int64_t h = 0; h < ph; ++h) {
            double* dst = cnt.data() + ((d0 + d) * Hp + h0 + h) * Wp + w0;
            for (int64_t w = 0; w < pw; ++w) dst[w] += 1.0;
          }
      }

  std::vector<T> probs(static_cast<size_t>(K * D * H * W));
  for (int64_t k = 0; k < K; ++k)
    for (int64_t d = 0; d < D; ++d)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          probs[static_cast<size_t>(((k * D + d) * H + h) * W + w)] =
              static_cast<T>(acc[static_cast<size_t>(((k * Dp + d) * Hp + h) * Wp + w)] /
                             cnt[static_cast<size_t>((d * Hp + h) * Wp + w)]);
  return Tensor<T>::from({K, D, H, W}, std::move(probs));
}

/// Argmax labels from averaged probabilities; ties break toward the lower
/// class index.
template <typename T>
BinaryMask predict_volume(const SegModel<T>& m, const Tensor<T>& volume, const std::array<int64_t, 3>& patch_shape,
                          double overlap) {
  Tensor<T> probs = predict_volume_probs(m, volume, patch_shape, overlap);
  const int64_t K = probs.dim(0), D = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  BinaryMask out;
  out.dims = {D, H, W};
  out.data.assign(static_cast<size_t>(D * H * W), 0);
  const T* pv = probs.data();
  const int64_t sp = D * H * W;
  for (int64_t i = 0; i < sp; ++i) {
    int best = 0;
    T bv = pv[i];
    for (int64_t k = 1; k < K; ++k)
      if (pv[k * sp + i] > bv) {
        bv = pv[k * sp + i];
        best = static_cast<int>(k);
      }
    out.data[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return out;
}

}  // namespace vseg

#endif  // VSEG_SEG_NET_HPP
