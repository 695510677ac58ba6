#ifndef VSEG_TRAINER_HPP
#define VSEG_TRAINER_HPP

#include <cstdio>
#include <string>
#include <vector>

#include "vseg/checkpoint.hpp"
#include "vseg/phantom.hpp"
#include "vseg/seg_net.hpp"

// Desk-scale training loop: foreground-biased patch sampling, SGD with
// momentum under a cosine annealing schedule, weighted deep supervision,
// and validation-based model selection. Everything is single-threaded and
// deterministic: (config, seed, dataset) fixes every logged number.

namespace vseg {

struct TrainConfig {
  int64_t epochs = 60;
  int64_t batch_size = 2;
  std::array<int64_t, 3> patch{32, 32, 32};
  double lr0 = 0.01;
  double lr_min = 1e-4;
  double momentum = 0.9;
  std::vector<double> ds_weights = {0.5, 0.3, 0.2};  // full-res to coarse; normalized
  double p_fg = 0.5;
  uint64_t seed = 0;
  double val_overlap = 0.5;
  LossConfig loss;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr_min > 0 && lr_min <= lr0)) throw ConfigError("train: need 0 < lr_min <= lr0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train: momentum must be in [0,1)");
    if (p_fg < 0 || p_fg > 1) throw ConfigError("train: p_fg must be in [0,1]");
    loss.validate();
  }

  /// Per-head weights normalized to sum 1; auto-generated (2^-i) when empty.
  std::vector<double> head_weights(size_t n_heads) const {
    std::vector<double> w = ds_weights;
    if (w.empty()) {
      w.resize(n_heads);
      for (size_t i = 0; i < n_heads; ++i) w[i] = std::ldexp(1.0, -static_cast<int>(i));
    }
    if (w.size() != n_heads)
      throw ConfigError("train: " + std::to_string(w.size()) + " ds_weights for " + std::to_string(n_heads) +
                        " supervision heads");
    double s = 0;
    for (double v : w) {
      if (v < 0) throw ConfigError("train: ds_weights must be nonnegative");
      s += v;
    }
    if (s <= 0) throw ConfigError("train: ds_weights must not all be zero");
    for (double& v : w) v /= s;
    return w;
  }
};

/// lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi epoch / total)).
inline double cosine_lr(int64_t epoch, int64_t total, double lr0, double lr_min) {
  if (total < 1 || epoch < 0 || epoch > total) throw ConfigError("cosine_lr: need 0 <= epoch <= total, total >= 1");
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total)));
}

/// v <- momentum v + g;  p <- p - lr v.
inline void sgd_step(std::vector<float>& p, const std::vector<float>& g, std::vector<float>& v, double lr,
                     double momentum) {
  if (p.size() != g.size() || p.size() != v.size()) throw ShapeError("sgd_step: size mismatch");
  const float m = static_cast<float>(momentum), l = static_cast<float>(lr);
  for (size_t i = 0; i < p.size(); ++i) {
    v[i] = m * v[i] + g[i];
    p[i] -= l * v[i];
  }
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

struct Patch {
  std::vector<float> image;   // [pd*ph*pw]
  std::vector<float> onehot;  // [K*pd*ph*pw], K = 2
  std::array<int64_t, 3> corner{};
};

/// With probability p_fg the crop centers on a uniformly chosen foreground
/// voxel, otherwise on a uniform voxel; the crop is clipped to bounds and
/// zero-padded where the volume is smaller than the patch.
inline Patch sample_patch(const VolumeSample& s, const std::array<int64_t, 3>& patch, double p_fg,
                          CounterRng& rng) {
  const int64_t D = s.mask.dims[0], H = s.mask.dims[1], W = s.mask.dims[2];
  const int64_t pd = patch[0], ph = patch[1], pw = patch[2];

  std::array<int64_t, 3> center{};
  bool fg = rng.uniform() < p_fg;
  if (fg) {
    const int64_t n_fg = s.mask.count();
    if (n_fg == 0) {
      fg = false;  // all-background volume: fall back to uniform
    } else {
      int64_t pick = rng.uniform_int(n_fg), seen = 0;
      for (int64_t i = 0; i < D * H * W; ++i) {
        if (s.mask.data[static_cast<size_t>(i)]) {
          if (seen++ == pick) {
            center = {i / (H * W), (i / W) % H, i % W};
            break;
          }
        }
      }
    }
  }
  if (!fg) {
    center = {rng.uniform_int(D), rng.uniform_int(H), rng.uniform_int(W)};
  }

  Patch out;
  const std::array<int64_t, 3> ext{D, H, W};
  const std::array<int64_t, 3> pext{pd, ph, pw};
  for (int a = 0; a < 3; ++a) {
    int64_t c = center[static_cast<size_t>(a)] - pext[static_cast<size_t>(a)] / 2;
    c = std::min(c, ext[static_cast<size_t>(a)] - pext[static_cast<size_t>(a)]);
    c = std::max<int64_t>(c, 0);
    out.corner[static_cast<size_t>(a)] = c;
  }

  out.image.assign(static_cast<size_t>(pd * ph * pw), 0.0f);
  out.onehot.assign(static_cast<size_t>(2 * pd * ph * pw), 0.0f);
  float* bg_plane = out.onehot.data();
  float* fg_plane = out.onehot.data() + pd * ph * pw;
  for (int64_t d = 0; d < pd; ++d) {
    const int64_t sd = out.corner[0] + d;
    for (int64_t h = 0; h < ph; ++h) {
      const int64_t sh = out.corner[1] + h;
      for (int64_t w = 0; w < pw; ++w) {
        const int64_t sw = out.corner[2] + w;
        const int64_t pi = (d * ph + h) * pw + w;
        if (sd < D && sh < H && sw < W) {
          const size_t si = static_cast<size_t>((sd * H + sh) * W + sw);
          out.image[static_cast<size_t>(pi)] = s.image.values()[si];
          if (s.mask.data[si])
            fg_plane[pi] = 1.0f;
          else
            bg_plane[pi] = 1.0f;
        } else {
          bg_plane[pi] = 1.0f;
        }
      }
    }
  }
  return out;
}

namespace detail {

/// Nearest-neighbor one-hot target at 1/2^level resolution.
inline TensorF downsample_onehot(const std::vector<float>& onehot, int64_t pd, int64_t ph, int64_t pw,
                                 int64_t level, int64_t batch_index, TensorF& dst) {
  const int64_t f = int64_t{1} << level;
  const int64_t dd = pd / f, dh = ph / f, dw = pw / f;
  float* out = dst.mutable_values().data() + batch_index * 2 * dd * dh * dw;
  for (int64_t k = 0; k < 2; ++k)
    for (int64_t d = 0; d < dd; ++d)
      for (int64_t h = 0; h < dh; ++h)
        for (int64_t w = 0; w < dw; ++w)
          out[((k * dd + d) * dh + h) * dw + w] =
              onehot[static_cast<size_t>(((k * pd + d * f) * ph + h * f) * pw + w * f)];
  return dst;
}

}  // namespace detail

struct TrainLogRow {
  int64_t epoch;
  double lr;
  double train_loss;
  double val_dice;  // percent
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  double best_val_dice = -1.0;
  int64_t best_epoch = -1;

  std::string log_csv() const {
    std::string s = "epoch,lr,train_loss,val_dice\n";
    char buf[128];
    for (const auto& r : log) {
      std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.6f,%.4f\n", static_cast<long long>(r.epoch), r.lr, r.train_loss,
                    r.val_dice);
      s += buf;
    }
    return s;
  }
};

/// Mean Dice (%) of sliding-window predictions over a sample list.
inline double mean_dice_percent(const SegModel<float>& m, const std::vector<VolumeSample>& samples,
                                const std::array<int64_t, 3>& patch, double overlap) {
  double acc = 0;
  for (const auto& s : samples) {
    BinaryMask pred = predict_volume(m, s.image, patch, overlap);
    acc += overlap_metrics(pred, s.mask).dice;
  }
  return samples.empty() ? 0.0 : acc / static_cast<double>(samples.size());
}

/// Trains in place and leaves the model at the best-validation parameters.
inline TrainResult train(SegModel<float>& model, const std::vector<VolumeSample>& train_set,
                         const std::vector<VolumeSample>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw ConfigError("train: datasets must be nonempty");
  const int64_t f = model.cfg.downsample_factor();
  for (int a = 0; a < 3; ++a)
    if (cfg.patch[static_cast<size_t>(a)] % f != 0)
      throw ConfigError("train: patch extent " + std::to_string(cfg.patch[static_cast<size_t>(a)]) +
                        " not divisible by " + std::to_string(f));

  CounterRng rng(cfg.seed, 100);
  const int64_t pd = cfg.patch[0], ph = cfg.patch[1], pw = cfg.patch[2];

  std::vector<std::vector<float>> velocity;
  velocity.reserve(model.params.size());
  for (auto& [n, t] : model.params) velocity.emplace_back(static_cast<size_t>(t.size()), 0.0f);

  const size_t n_heads = model.heads.size();
  const std::vector<double> head_w = cfg.head_weights(n_heads);

  TrainResult result;
  std::vector<std::vector<float>> best_params;

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);

    // Deterministic shuffle.
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0;
    int64_t steps = 0;
    for (size_t batch_start = 0; batch_start < order.size(); batch_start += static_cast<size_t>(cfg.batch_size)) {
      const int64_t B =
          std::min<int64_t>(cfg.batch_size, static_cast<int64_t>(order.size() - batch_start));

      TensorF images = TensorF::zeros({B, 1, pd, ph, pw});
      std::vector<TensorF> targets;
      for (size_t hi = 0; hi < n_heads; ++hi) {
        const int64_t df = int64_t{1} << static_cast<int64_t>(hi);
        targets.push_back(TensorF::zeros({B, 2, pd / df, ph / df, pw / df}));
      }
      for (int64_t b = 0; b < B; ++b) {
        const auto& sample = train_set[order[batch_start + static_cast<size_t>(b)]];
        Patch patch = sample_patch(sample, cfg.patch, cfg.p_fg, rng);
        std::copy(patch.image.begin(), patch.image.end(),
                  images.mutable_values().begin() + b * pd * ph * pw);
        for (size_t hi = 0; hi < n_heads; ++hi)
          detail::downsample_onehot(patch.onehot, pd, ph, pw, static_cast<int64_t>(hi), b, targets[hi]);
      }

      for (auto& [n, t] : model.params) t.zero_grad();
      std::vector<TensorF> logits = forward(model, images);
      TensorF loss;
      for (size_t hi = 0; hi < n_heads; ++hi) {
        TensorF term = scale(total_loss(softmax(logits[hi], 1), targets[hi], cfg.loss), head_w[hi]);
        loss = hi == 0 ? term : add(loss, term);
      }
      backward(loss);

      const double lv = loss.scalar();
      if (!std::isfinite(lv)) {
        for (auto& [n, t] : model.params) {
          if (!t.has_grad()) continue;
          for (float g : t.grad())
            if (!std::isfinite(g))
              throw Error("train: non-finite loss at epoch " + std::to_string(epoch) +
                          "; first non-finite gradient in parameter '" + n + "'");
        }
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + " (all gradients finite)");
      }
      epoch_loss += lv;
      ++steps;

      size_t pi = 0;
      for (auto& [n, t] : model.params) {
        if (t.has_grad()) sgd_step(t.mutable_values(), t.grad(), velocity[pi], lr, cfg.momentum);
        ++pi;
      }
    }

    const double val_dice = mean_dice_percent(model, val_set, cfg.patch, cfg.val_overlap);
    result.log.push_back({epoch, lr, epoch_loss / static_cast<double>(steps), val_dice});
    if (val_dice > result.best_val_dice) {
      result.best_val_dice = val_dice;
      result.best_epoch = epoch;
      best_params.clear();
      for (auto& [n, t] : model.params) best_params.push_back(t.values());
    }
  }

  size_t pi = 0;
  for (auto& [n, t] : model.params) t.mutable_values() = best_params[pi++];
  return result;
}

}  // namespace vseg

#endif  // VSEG_TRAINER_HPP
