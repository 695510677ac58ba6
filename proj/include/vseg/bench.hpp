#ifndef VSEG_BENCH_HPP
#define VSEG_BENCH_HPP

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "vseg/grad_check.hpp"
#include "vseg/ssm.hpp"

// Depth-scaling benchmark: the BiM scan path (linear in D) against a naive
// quadratic depth-attention comparator, timed on identical inputs.

namespace vseg {

/// softmax(Q K^T / sqrt(C)) V along the depth axis, per sequence. The score
/// matrix is materialized and reduced with plain loops on purpose: the
/// comparator's cost must track its O(T^2) operation count.
template <typename T>
Tensor<T> depth_attention(const Tensor<T>& seq, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv) {
  if (seq.rank() != 3) throw ShapeError("depth_attention: input must be [N,T,C]");
  const int64_t N = seq.dim(0), Tn = seq.dim(1), C = seq.dim(2);
  Tensor<T> q = linear(seq, wq);
  Tensor<T> k = linear(seq, wk);
  Tensor<T> v = linear(seq, wv);
  auto out = detail::make_node<T>("depth_attention", seq.shape());
  const T inv_sqrt_c = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));
  std::vector<T> scores(static_cast<size_t>(Tn));
  for (int64_t n = 0; n < N; ++n) {
    const T* qn = q.data() + n * Tn * C;
    const T* kn = k.data() + n * Tn * C;
    const T* vn = v.data() + n * Tn * C;
    T* on = out->value.data() + n * Tn * C;
    for (int64_t i = 0; i < Tn; ++i) {
      T mx = std::numeric_limits<T>::lowest();
      for (int64_t j = 0; j < Tn; ++j) {
        T s = 0;
        for (int64_t c = 0; c < C; ++c) s += qn[i * C + c] * kn[j * C + c];
        s *= inv_sqrt_c;
        scores[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double denom = 0;
      for (int64_t j = 0; j < Tn; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
        denom += scores[static_cast<size_t>(j)];
      }
      const T inv = static_cast<T>(1.0 / denom);
      for (int64_t j = 0; j < Tn; ++j) {
        const T w = scores[static_cast<size_t>(j)] * inv;
        const T* vr = vn + j * C;
        T* orow = on + i * C;
        for (int64_t c = 0; c < C; ++c) orow[c] += w * vr[c];
      }
    }
  }
  return Tensor<T>(out);
}

/// Row-stochastic attention weights [N,T,T] (for the convexity property).
template <typename T>
Tensor<T> depth_attention_weights(const Tensor<T>& seq, const Tensor<T>& wq, const Tensor<T>& wk) {
  const int64_t N = seq.dim(0), Tn = seq.dim(1), C = seq.dim(2);
  Tensor<T> q = linear(seq, wq);
  Tensor<T> k = linear(seq, wk);
  auto out = detail::make_node<T>("depth_attention_weights", Shape{N, Tn, Tn});
  const T inv_sqrt_c = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));
  for (int64_t n = 0; n < N; ++n) {
    const T* qn = q.data() + n * Tn * C;
    const T* kn = k.data() + n * Tn * C;
    T* on = out->value.data() + n * Tn * Tn;
    for (int64_t i = 0; i < Tn; ++i) {
      T mx = std::numeric_limits<T>::lowest();
      for (int64_t j = 0; j < Tn; ++j) {
        T s = 0;
        for (int64_t c = 0; c < C; ++c) s += qn[i * C + c] * kn[j * C + c];
        on[i * Tn + j] = s * inv_sqrt_c;
        mx = std::max(mx, on[i * Tn + j]);
      }
      double denom = 0;
      for (int64_t j = 0; j < Tn; ++j) {
        on[i * Tn + j] = std::exp(on[i * Tn + j] - mx);
        denom += on[i * Tn + j];
      }
      const T inv = static_cast<T>(1.0 / denom);
      for (int64_t j = 0; j < Tn; ++j) on[i * Tn + j] *= inv;
    }
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string method;  // "bim_scan" or "depth_attention"
  int64_t depth = 0;
  double mean_s = 0, std_s = 0, median_s = 0;
  int64_t peak_bytes = 0;
};

struct BenchConfig {
  std::vector<int64_t> depths = {16, 32, 64, 128};
  int64_t batch = 1, channels = 32, height = 8, width = 8;
  int repeats = 5;
  int warmup = 2;
  uint64_t seed = 0;
};

struct BenchReport {
  BenchConfig cfg;
  std::vector<BenchRow> rows;

  const BenchRow* find(const std::string& method, int64_t depth) const {
    for (const auto& r : rows)
      if (r.method == method && r.depth == depth) return &r;
    return nullptr;
  }

  /// t(2D)/t(D) from per-row medians.
  double doubling_ratio(const std::string& method, int64_t depth) const {
    const BenchRow* lo = find(method, depth);
    const BenchRow* hi = find(method, 2 * depth);
    if (!lo || !hi) throw ConfigError("bench: missing rows for doubling ratio at D=" + std::to_string(depth));
    return hi->median_s / lo->median_s;
  }

  std::string csv() const {
    std::string s = "method,depth,mean_s,std_s,peak_bytes\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%lld,%.6f,%.6f,%lld\n", r.method.c_str(),
                    static_cast<long long>(r.depth), r.mean_s, r.std_s, static_cast<long long>(r.peak_bytes));
      s += buf;
    }
    return s;
  }
};

namespace detail {

template <typename Fn>
BenchRow time_fn(const std::string& method, int64_t depth, int repeats, int warmup, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> times(static_cast<size_t>(repeats));
  AllocStats::reset_peak();
  const int64_t base = AllocStats::peak_bytes();
  for (auto& t : times) {
    const auto t0 = clock::now();
    fn();
    t = std::chrono::duration<double>(clock::now() - t0).count();
  }
  BenchRow row;
  row.method = method;
  row.depth = depth;
  row.peak_bytes = AllocStats::peak_bytes() - base;
  double m = 0;
  for (double t : times) m += t;
  m /= static_cast<double>(times.size());
  double s2 = 0;
  for (double t : times) s2 += (t - m) * (t - m);
  row.mean_s = m;
  row.std_s = std::sqrt(s2 / static_cast<double>(times.size()));
  std::sort(times.begin(), times.end());
  row.median_s = times[times.size() / 2];
  return row;
}

}  // namespace detail

/// Times forward passes of the BiM block and the quadratic depth-attention
/// comparator on bit-identical inputs per depth. Single-threaded.
inline BenchReport bench_scaling(const BenchConfig& cfg) {
  for (size_t i = 1; i < cfg.depths.size(); ++i)
    if (cfg.depths[i] <= cfg.depths[i - 1]) throw ConfigError("bench: depths must be distinct ascending");
  NoGradGuard ng;
  BenchReport rep;
  rep.cfg = cfg;

  CounterRng rng(cfg.seed, 21);
  BiMParams<float> bim = bim_init<float>(cfg.channels, SsmConfig{}, rng);
  // out_proj / mlp_w2 start at zero by design; give them mass so the timed
  // path does real work end to end.
  for (auto* t : {&bim.ssm.out_proj, &bim.mlp_w2})
    for (auto& v : t->mutable_values()) v = static_cast<float>(rng.uniform(-0.05, 0.05));
  TensorF wq = detail::uniform_init<float>({cfg.channels, cfg.channels}, cfg.channels, rng);
  TensorF wk = detail::uniform_init<float>({cfg.channels, cfg.channels}, cfg.channels, rng);
  TensorF wv = detail::uniform_init<float>({cfg.channels, cfg.channels}, cfg.channels, rng);

  for (int64_t depth : cfg.depths) {
    CounterRng data_rng(cfg.seed ^ static_cast<uint64_t>(depth), 22);
    TensorF x = random_tensor_f({cfg.batch, cfg.channels, depth, cfg.height, cfg.width}, data_rng);
    TensorF seq = make_depth_sequences(x);
    rep.rows.push_back(detail::time_fn("bim_scan", depth, cfg.repeats, cfg.warmup, [&] {
      TensorF y = bim_forward(x, bim);
      (void)y;
    }));
    rep.rows.push_back(detail::time_fn("depth_attention", depth, cfg.repeats, cfg.warmup, [&] {
      TensorF y = depth_attention(seq, wq, wk, wv);
      (void)y;
    }));
  }
  return rep;
}

}  // namespace vseg

#endif  // VSEG_BENCH_HPP
