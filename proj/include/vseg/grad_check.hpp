#ifndef VSEG_GRAD_CHECK_HPP
#define VSEG_GRAD_CHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "vseg/ops.hpp"

namespace vseg {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t skipped = 0;  // elements within `step` of a kink (relu/max)
  int worst_input = -1;
  int64_t worst_elem = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double tol = 0.0;
  bool pass() const { return max_rel_err <= tol; }
  std::string str() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "max_rel_err=%.3e (tol %.1e) checked=%lld skipped=%lld %s", max_rel_err, tol,
                  static_cast<long long>(checked), static_cast<long long>(skipped), pass() ? "PASS" : "FAIL");
    return buf;
  }
};

/// Compares reverse-mode gradients of fn against central finite differences
/// of a fixed weighted scalar reduction of the output. float64 only; finite
/// differences are not trustworthy at float32.
///
/// Elements where the two one-sided differences disagree badly (a kink of
/// relu / max within `step` of the evaluation point) are skipped and counted
/// rather than failed.
inline GradCheckReport grad_check(const std::function<TensorD(const std::vector<TensorD>&)>& fn,
                                  std::vector<TensorD> inputs, double step = 1e-5, double tol = 1e-5) {
  for (auto& in : inputs) in.set_requires_grad(true);

  TensorD y0 = fn(inputs);
  CounterRng rng(0xc0ffee);
  std::vector<double> w(static_cast<size_t>(y0.size()));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  TensorD seed = TensorD::from(y0.shape(), w);

  for (auto& in : inputs) in.zero_grad();
  backward(y0, seed);

  auto phi = [&](void) -> double {
    NoGradGuard ng;
    TensorD y = fn(inputs);
    double s = 0;
    for (size_t i = 0; i < w.size(); ++i) s += y.values()[i] * w[i];
    return s;
  };
  const double phi0 = phi();

  GradCheckReport rep;
  rep.tol = tol;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].mutable_values();
    const bool has_g = inputs[k].has_grad();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double v = vals[i];
      vals[i] = v + step;
      const double fp = phi();
      vals[i] = v - step;
      const double fm = phi();
      vals[i] = v;

      const double dplus = (fp - phi0) / step;
      const double dminus = (phi0 - fm) / step;
      if (std::abs(dplus - dminus) > 1e-3 * std::max({std::abs(dplus), std::abs(dminus), 1.0})) {
        ++rep.skipped;
        continue;
      }
      const double fd = (fp - fm) / (2 * step);
      const double ad = has_g ? inputs[k].grad()[i] : 0.0;
      const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-8});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(k);
        rep.worst_elem = static_cast<int64_t>(i);
        rep.worst_analytic = ad;
        rep.worst_numeric = fd;
      }
    }
  }
  return rep;
}

inline TensorD random_tensor_d(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return TensorD::from(std::move(shape), std::move(v));
}

inline TensorF random_tensor_f(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(static_cast<size_t>(numel(shape)));
  for (auto& e : v) e = static_cast<float>(rng.uniform(lo, hi));
  return TensorF::from(std::move(shape), std::move(v));
}

}  // namespace vseg

#endif  // VSEG_GRAD_CHECK_HPP
