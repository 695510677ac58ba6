#ifndef VSEG_LOSS_METRICS_HPP
#define VSEG_LOSS_METRICS_HPP

#include <array>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "vseg/ops.hpp"

// Hybrid Dice-CE objective and the evaluation suite (Dice, IoU, Precision,
// Recall, HD95 in millimetres).

namespace vseg {

struct LossConfig {
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
  double epsilon = 1e-5;      // Dice stabilizer, in numerator and denominator
  double clamp_floor = 1e-7;  // probability floor before log

  void validate() const {
    if (lambda_dice < 0 || lambda_ce < 0) throw ConfigError("loss: lambda weights must be nonnegative");
    if (epsilon <= 0) throw ConfigError("loss: epsilon must be positive");
  }
};

/// Soft Dice loss averaged over K classes; sums run over batch and voxels.
/// An empty class (no predicted and no true mass) contributes eps/eps = 1,
/// i.e. zero loss.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g, double eps) {
  if (p.shape() != g.shape())
    throw ShapeError("dice_loss: p " + shape_str(p.shape()) + " vs g " + shape_str(g.shape()));
  if (p.rank() != 5) throw ShapeError("dice_loss: expected [B,K,D,H,W]");
  const std::vector<int> axes = {0, 2, 3, 4};
  Tensor<T> s_pg = reduce_sum(mul(p, g), axes);
  Tensor<T> s_pp = reduce_sum(mul(p, p), axes);
  Tensor<T> s_gg = reduce_sum(mul(g, g), axes);
  Tensor<T> num = add_const(scale(s_pg, 2.0), eps);
  Tensor<T> den = add_const(add(s_pp, s_gg), eps);
  Tensor<T> per_class = div(num, den);  // [K]
  return add_const(negate(reduce_mean(per_class, {0})), 1.0);
}

/// Voxel-wise cross entropy, -(1/N) sum_i sum_c g log p with N the voxel
/// count (not voxels*classes). p is clamped to [clamp_floor, 1] before log.
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& p, const Tensor<T>& g, double clamp_floor) {
  if (p.shape() != g.shape())
    throw ShapeError("ce_loss: p " + shape_str(p.shape()) + " vs g " + shape_str(g.shape()));
  if (p.rank() != 5) throw ShapeError("ce_loss: expected [B,K,D,H,W]");
  const int64_t n_vox = p.dim(0) * p.dim(2) * p.dim(3) * p.dim(4);
  Tensor<T> pc = clamp(p, clamp_floor, 1.0);
  Tensor<T> s = sum_all(mul(g, log(pc)));
  return scale(s, -1.0 / static_cast<double>(n_vox));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& p, const Tensor<T>& g, const LossConfig& cfg) {
  cfg.validate();
  return add(scale(dice_loss(p, g, cfg.epsilon), cfg.lambda_dice),
             scale(ce_loss(p, g, cfg.clamp_floor), cfg.lambda_ce));
}

// ---------------------------------------------------------------------------
// Binary masks and overlap metrics
// ---------------------------------------------------------------------------

struct Spacing {
  double z = 1.0, y = 1.0, x = 1.0;  // mm
};

struct BinaryMask {
  std::array<int64_t, 3> dims{};  // D,H,W
  std::vector<uint8_t> data;      // row-major, W fastest

  int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  uint8_t at(int64_t d, int64_t h, int64_t w) const {
    return data[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
  }
  int64_t count() const {
    int64_t c = 0;
    for (uint8_t v : data) c += (v != 0);
    return c;
  }
};

/// Percentages from TP/FP/FN counts. A 0/0 ratio is reported as 100 with the
/// corresponding empty flag set, so aggregate means stay defined on
/// degenerate cases.
struct OverlapResult {
  double dice = 0, iou = 0, precision = 0, recall = 0;
  bool dice_empty = false, iou_empty = false, precision_empty = false, recall_empty = false;
};

inline OverlapResult overlap_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.dims != gt.dims)
    throw ShapeError("overlap_metrics: mask extents differ (" + std::to_string(pred.dims[0]) + "," +
                     std::to_string(pred.dims[1]) + "," + std::to_string(pred.dims[2]) + ") vs (" +
                     std::to_string(gt.dims[0]) + "," + std::to_string(gt.dims[1]) + "," +
                     std::to_string(gt.dims[2]) + ")");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    tp += (p && g);
    fp += (p && !g);
    fn += (!p && g);
  }
  OverlapResult r;
  auto ratio = [](int64_t num, int64_t den, double& out, bool& empty) {
    if (den == 0) {
      out = 100.0;
      empty = true;
    } else {
      out = 100.0 * static_cast<double>(num) / static_cast<double>(den);
    }
  };
  ratio(2 * tp, 2 * tp + fp + fn, r.dice, r.dice_empty);
  ratio(tp, tp + fp + fn, r.iou, r.iou_empty);
  ratio(tp, tp + fp, r.precision, r.precision_empty);
  ratio(tp, tp + fn, r.recall, r.recall_empty);
  return r;
}

// ---------------------------------------------------------------------------
// HD95: 95th percentile of symmetric boundary-to-boundary distances.
// ---------------------------------------------------------------------------

struct Hd95Result {
  bool defined = false;
  double mm = 0.0;
};

namespace detail {

struct Point3 {
  double z, y, x;
};

/// Foreground voxels with at least one six-connected background or
/// out-of-bounds neighbor, as spacing-scaled voxel centers.
inline std::vector<Point3> boundary_points(const BinaryMask& m, const Spacing& sp) {
  std::vector<Point3> pts;
  const int64_t D = m.dims[0], H = m.dims[1], W = m.dims[2];
  for (int64_t d = 0; d < D; ++d)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        if (!m.at(d, h, w)) continue;
        const bool surface = (d == 0 || !m.at(d - 1, h, w)) || (d == D - 1 || !m.at(d + 1, h, w)) ||
                             (h == 0 || !m.at(d, h - 1, w)) || (h == H - 1 || !m.at(d, h + 1, w)) ||
                             (w == 0 || !m.at(d, h, w - 1)) || (w == W - 1 || !m.at(d, h, w + 1));
        if (surface)
          pts.push_back({static_cast<double>(d) * sp.z, static_cast<double>(h) * sp.y,
                         static_cast<double>(w) * sp.x});
      }
  return pts;
}

// Small 3-D kd-tree for exact nearest-neighbour queries over boundary points.
class KdTree3 {
 public:
  explicit KdTree3(std::vector<Point3> pts) : pts_(std::move(pts)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), size_t{0});
    nodes_.reserve(pts_.size());
    root_ = build(0, pts_.size(), 0);
  }

  double min_sq_dist(const Point3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return best;
  }

 private:
  struct KdNode {
    size_t point;
    int axis;
    int left = -1, right = -1;
  };

  static double coord(const Point3& p, int axis) { return axis == 0 ? p.z : (axis == 1 ? p.y : p.x); }

  int build(size_t lo, size_t hi, int axis) {
    if (lo >= hi) return -1;
    const size_t mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](size_t a, size_t b) { return coord(pts_[a], axis) < coord(pts_[b], axis); });
    const int node = static_cast<int>(nodes_.size());
    nodes_.push_back({idx_[mid], axis, -1, -1});
    const int next = (axis + 1) % 3;
    nodes_[static_cast<size_t>(node)].left = build(lo, mid, next);
    nodes_[static_cast<size_t>(node)].right = build(mid + 1, hi, next);
    return node;
  }

  void search(int node, const Point3& q, double& best) const {
    if (node < 0) return;
    const KdNode& n = nodes_[static_cast<size_t>(node)];
    const Point3& p = pts_[n.point];
    const double dz = q.z - p.z, dy = q.y - p.y, dx = q.x - p.x;
    const double d2 = dz * dz + dy * dy + dx * dx;
    if (d2 < best) best = d2;
    const double delta = coord(q, n.axis) - coord(p, n.axis);
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search(near, q, best);
    if (delta * delta < best) search(far, q, best);
  }

  std::vector<Point3> pts_;
  std::vector<size_t> idx_;
  std::vector<KdNode> nodes_;
  int root_ = -1;
};

/// Percentile of a distance sample by linear interpolation between order
/// statistics (rank q*(m-1)).
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double rank = q * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v[lo];
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace detail

/// Max of the two directed 95th percentiles of boundary distances.
/// Undefined when either mask is empty.
inline Hd95Result hd95(const BinaryMask& a, const BinaryMask& b, const Spacing& sp) {
  if (a.dims != b.dims) throw ShapeError("hd95: mask extents differ");
  if (a.count() == 0 || b.count() == 0) return {false, 0.0};
  auto pa = detail::boundary_points(a, sp);
  auto pb = detail::boundary_points(b, sp);
  detail::KdTree3 ta(pa), tb(pb);
  std::vector<double> dab(pa.size()), dba(pb.size());
  for (size_t i = 0; i < pa.size(); ++i) dab[i] = std::sqrt(tb.min_sq_dist(pa[i]));
  for (size_t i = 0; i < pb.size(); ++i) dba[i] = std::sqrt(ta.min_sq_dist(pb[i]));
  return {true, std::max(detail::percentile(std::move(dab), 0.95), detail::percentile(std::move(dba), 0.95))};
}

// ---------------------------------------------------------------------------
// Per-case metrics report and its CSV serialization.
// ---------------------------------------------------------------------------

struct CaseMetrics {
  std::string case_id;
  OverlapResult overlap;
  Hd95Result hd;
};

struct MetricsReport {
  std::vector<CaseMetrics> rows;
};

/// Header `case_id,dice,iou,precision,recall,hd95_mm`, one row per case,
/// `NA` for undefined HD95, then `mean` and `std` rows (population std;
/// HD95 aggregates run over defined values only). 4 decimal places.
inline std::string metrics_report_csv(const MetricsReport& rep) {
  std::string out = "case_id,dice,iou,precision,recall,hd95_mm\n";
  char buf[256];
  auto fmt_row = [&](const std::string& id, double d, double i, double p, double r, const Hd95Result& hd) {
    if (hd.defined)
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f\n", id.c_str(), d, i, p, r, hd.mm);
    else
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,NA\n", id.c_str(), d, i, p, r);
    out += buf;
  };
  for (const auto& c : rep.rows) fmt_row(c.case_id, c.overlap.dice, c.overlap.iou, c.overlap.precision,
                                         c.overlap.recall, c.hd);

  auto stats = [](const std::vector<double>& v) -> std::pair<double, double> {
    if (v.empty()) return {0.0, 0.0};
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s2 = 0;
    for (double x : v) s2 += (x - m) * (x - m);
    return {m, std::sqrt(s2 / static_cast<double>(v.size()))};
  };
  std::vector<double> dv, iv, pv, rv, hv;
  for (const auto& c : rep.rows) {
    dv.push_back(c.overlap.dice);
    iv.push_back(c.overlap.iou);
    pv.push_back(c.overlap.precision);
    rv.push_back(c.overlap.recall);
    if (c.hd.defined) hv.push_back(c.hd.mm);
  }
  auto [dm, ds] = stats(dv);
  auto [im, is] = stats(iv);
  auto [pm, ps] = stats(pv);
  auto [rm, rs] = stats(rv);
  auto [hm, hs] = stats(hv);
  if (!hv.empty()) {
    std::snprintf(buf, sizeof(buf), "mean,%.4f,%.4f,%.4f,%.4f,%.4f\n", dm, im, pm, rm, hm);
    out += buf;
    std::snprintf(buf, sizeof(buf), "std,%.4f,%.4f,%.4f,%.4f,%.4f\n", ds, is, ps, rs, hs);
    out += buf;
  } else {
    std::snprintf(buf, sizeof(buf), "mean,%.4f,%.4f,%.4f,%.4f,NA\n", dm, im, pm, rm);
    out += buf;
    std::snprintf(buf, sizeof(buf), "std,%.4f,%.4f,%.4f,%.4f,NA\n", ds, is, ps, rs);
    out += buf;
  }
  return out;
}

}  // namespace vseg

#endif  // VSEG_LOSS_METRICS_HPP
