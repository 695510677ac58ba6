#include <catch2/catch_amalgamated.hpp>

#include "vseg/grad_check.hpp"
#include "vseg/loss_metrics.hpp"

using namespace vseg;

namespace {

// O(n^2) all-pairs oracle sharing the boundary definition with the
// implementation so the test isolates the distance computation.
double hd95_bruteforce(const BinaryMask& a, const BinaryMask& b, const Spacing& sp) {
  auto boundary = [&](const BinaryMask& m) {
    std::vector<std::array<double, 3>> pts;
    const int64_t D = m.dims[0], H = m.dims[1], W = m.dims[2];
    for (int64_t d = 0; d < D; ++d)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          if (!m.at(d, h, w)) continue;
          bool surf = false;
          const int64_t nb[6][3] = {{d - 1, h, w}, {d + 1, h, w}, {d, h - 1, w},
                                    {d, h + 1, w}, {d, h, w - 1}, {d, h, w + 1}};
          for (const auto& q : nb) {
            if (q[0] < 0 || q[0] >= D || q[1] < 0 || q[1] >= H || q[2] < 0 || q[2] >= W || !m.at(q[0], q[1], q[2])) {
              surf = true;
              break;
            }
          }
          if (surf) pts.push_back({d * sp.z, h * sp.y, w * sp.x});
        }
    return pts;
  };
  auto directed = [](const std::vector<std::array<double, 3>>& from, const std::vector<std::array<double, 3>>& to) {
    std::vector<double> d(from.size());
    for (size_t i = 0; i < from.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dz = from[i][0] - q[0], dy = from[i][1] - q[1], dx = from[i][2] - q[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      d[i] = std::sqrt(best);
    }
    return d;
  };
  auto pct95 = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double rank = 0.95 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v[lo];
    return v[lo] + frac * (v[lo + 1] - v[lo]);
  };
  auto pa = boundary(a);
  auto pb = boundary(b);
  return std::max(pct95(directed(pa, pb)), pct95(directed(pb, pa)));
}

BinaryMask random_blob_mask(int64_t D, int64_t H, int64_t W, CounterRng& rng) {
  BinaryMask m;
  m.dims = {D, H, W};
  m.data.assign(static_cast<size_t>(D * H * W), 0);
  const int n_blobs = 1 + static_cast<int>(rng.uniform_int(3));
  for (int bidx = 0; bidx < n_blobs; ++bidx) {
    const double cz = rng.uniform(0, static_cast<double>(D));
    const double cy = rng.uniform(0, static_cast<double>(H));
    const double cx = rng.uniform(0, static_cast<double>(W));
    const double r = rng.uniform(1.0, 4.5);
    for (int64_t d = 0; d < D; ++d)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          const double dz = d - cz, dy = h - cy, dx = w - cx;
          if (dz * dz + dy * dy + dx * dx <= r * r) m.data[static_cast<size_t>((d * H + h) * W + w)] = 1;
        }
  }
  if (m.count() == 0) m.data[0] = 1;
  return m;
}

TensorD softmax_probs(const TensorD& logits) { return softmax(logits, 1); }

}  // namespace

TEST_CASE("dice_loss equation exactness") {
  SECTION("perfect one-hot prediction gives exactly zero") {
    std::vector<double> g(2 * 8, 0.0);
    CounterRng rng(50);
    for (int i = 0; i < 8; ++i) {
      const bool fg = rng.uniform() < 0.5;
      g[static_cast<size_t>(fg ? 8 + i : i)] = 1.0;
    }
    auto p = TensorD::from({1, 2, 2, 2, 2}, g);
    auto gt = TensorD::from({1, 2, 2, 2, 2}, g);
    CHECK(dice_loss(p, gt, 1e-5).scalar() == 0.0);
  }
  SECTION("uniform half prediction approaches 1/3") {
    // K=2, N voxels, p = 0.5 everywhere, half the voxels foreground.
    const int64_t n = 1000;
    std::vector<double> pv(static_cast<size_t>(2 * n), 0.5);
    std::vector<double> gv(static_cast<size_t>(2 * n), 0.0);
    for (int64_t i = 0; i < n; ++i) gv[static_cast<size_t>(i < n / 2 ? i : n + i)] = 1.0;
    auto p = TensorD::from({1, 2, 1, 2, static_cast<int64_t>(n / 2)}, pv);
    auto g = TensorD::from({1, 2, 1, 2, static_cast<int64_t>(n / 2)}, gv);
    const double eps = 1e-9;
    const double loss = dice_loss(p, g, eps).scalar();
    // direct formula oracle: per class (2*0.25n + eps)/(0.25n + 0.5n + eps)
    const double term = (2 * 0.25 * n + eps) / (0.25 * n + 0.5 * n + eps);
    CHECK(loss == Catch::Approx(1.0 - term).margin(1e-12));
    CHECK(loss == Catch::Approx(1.0 / 3.0).margin(1e-3));
  }
  SECTION("empty class contributes zero loss") {
    // All-background: class 1 has neither predicted nor true mass.
    std::vector<double> pv(2 * 4, 0.0), gv(2 * 4, 0.0);
    for (int i = 0; i < 4; ++i) pv[static_cast<size_t>(i)] = gv[static_cast<size_t>(i)] = 1.0;
    auto p = TensorD::from({1, 2, 1, 2, 2}, pv);
    auto g = TensorD::from({1, 2, 1, 2, 2}, gv);
    CHECK(dice_loss(p, g, 1e-5).scalar() == 0.0);
  }
}

TEST_CASE("ce_loss equation exactness") {
  SECTION("perfect one-hot gives exactly zero") {
    std::vector<double> g(2 * 4, 0.0);
    for (int i = 0; i < 4; ++i) g[static_cast<size_t>(i < 2 ? i : 4 + i)] = 1.0;
    auto p = TensorD::from({1, 2, 1, 2, 2}, g);
    auto gt = TensorD::from({1, 2, 1, 2, 2}, g);
    CHECK(ce_loss(p, gt, 1e-7).scalar() == 0.0);
  }
  SECTION("p = 0.5 for the true class gives ln 2") {
    CounterRng rng(51);
    std::vector<double> pv(2 * 8, 0.5), gv(2 * 8, 0.0);
    for (int i = 0; i < 8; ++i) gv[static_cast<size_t>(rng.uniform() < 0.5 ? i : 8 + i)] = 1.0;
    auto p = TensorD::from({1, 2, 2, 2, 2}, pv);
    auto g = TensorD::from({1, 2, 2, 2, 2}, gv);
    CHECK(ce_loss(p, g, 1e-7).scalar() == Catch::Approx(std::log(2.0)).margin(1e-6));
  }
  SECTION("random case matches the scalar loop oracle") {
    CounterRng rng(52);
    auto logits = random_tensor_d({1, 2, 2, 2, 2}, rng);
    auto p = softmax_probs(logits);
    std::vector<double> gv(2 * 8, 0.0);
    for (int i = 0; i < 8; ++i) gv[static_cast<size_t>(rng.uniform() < 0.5 ? i : 8 + i)] = 1.0;
    auto g = TensorD::from({1, 2, 2, 2, 2}, gv);
    const double got = ce_loss(p, g, 1e-7).scalar();
    double expect = 0;
    for (size_t i = 0; i < gv.size(); ++i)
      if (gv[i] > 0) expect -= std::log(std::max(p.values()[i], 1e-7));
    expect /= 8.0;
    CHECK(got == Catch::Approx(expect).margin(1e-7));
  }
}

TEST_CASE("total_loss lambda toggles are exact") {
  CounterRng rng(53);
  auto logits = random_tensor_d({1, 2, 2, 2, 2}, rng);
  auto p = softmax_probs(logits);
  std::vector<double> gv(2 * 8, 0.0);
  for (int i = 0; i < 8; ++i) gv[static_cast<size_t>(rng.uniform() < 0.5 ? i : 8 + i)] = 1.0;
  auto g = TensorD::from({1, 2, 2, 2, 2}, gv);

  LossConfig cfg;
  cfg.lambda_ce = 0;
  CHECK(total_loss(p, g, cfg).scalar() == dice_loss(p, g, cfg.epsilon).scalar());
  cfg.lambda_ce = 1;
  cfg.lambda_dice = 0;
  CHECK(total_loss(p, g, cfg).scalar() == ce_loss(p, g, cfg.clamp_floor).scalar());
  cfg.lambda_dice = 1;
  auto perfect = TensorD::from({1, 2, 2, 2, 2}, gv);
  CHECK(total_loss(perfect, g, cfg).scalar() == 0.0);
}

TEST_CASE("losses are permutation invariant and bounded") {
  CounterRng rng(54);
  auto logits = random_tensor_d({1, 2, 2, 2, 3}, rng);
  auto p = softmax_probs(logits);
  std::vector<double> gv(2 * 12, 0.0);
  for (int i = 0; i < 12; ++i) gv[static_cast<size_t>(rng.uniform() < 0.5 ? i : 12 + i)] = 1.0;
  auto g = TensorD::from({1, 2, 2, 2, 3}, gv);

  // Consistent voxel reorder (same permutation in every class plane).
  std::vector<size_t> perm(12);
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
  std::vector<double> pv2(p.values().size()), gv2(gv.size());
  for (int64_t c = 0; c < 2; ++c)
    for (size_t i = 0; i < 12; ++i) {
      pv2[static_cast<size_t>(c * 12) + i] = p.values()[static_cast<size_t>(c * 12) + perm[i]];
      gv2[static_cast<size_t>(c * 12) + i] = gv[static_cast<size_t>(c * 12) + perm[i]];
    }
  auto p2 = TensorD::from(p.shape(), pv2);
  auto g2 = TensorD::from(g.shape(), gv2);

  const double d1 = dice_loss(p, g, 1e-5).scalar();
  const double d2 = dice_loss(p2, g2, 1e-5).scalar();
  CHECK(d1 == Catch::Approx(d2).margin(1e-12));
  const double c1 = ce_loss(p, g, 1e-7).scalar();
  const double c2 = ce_loss(p2, g2, 1e-7).scalar();
  CHECK(c1 == Catch::Approx(c2).margin(1e-12));

  CHECK(d1 >= 0.0);
  CHECK(d1 <= 1.0);
  CHECK(c1 >= 0.0);
}

TEST_CASE("overlap_metrics cases") {
  SECTION("identical nonempty masks score 100 everywhere") {
    BinaryMask m{{2, 2, 2}, {1, 0, 1, 0, 1, 0, 1, 0}};
    auto r = overlap_metrics(m, m);
    CHECK(r.dice == 100.0);
    CHECK(r.iou == 100.0);
    CHECK(r.precision == 100.0);
    CHECK(r.recall == 100.0);
    CHECK_FALSE(r.precision_empty);
  }
  SECTION("empty prediction against nonempty truth") {
    BinaryMask pred{{1, 2, 2}, {0, 0, 0, 0}};
    BinaryMask gt{{1, 2, 2}, {1, 1, 0, 0}};
    auto r = overlap_metrics(pred, gt);
    CHECK(r.dice == 0.0);
    CHECK(r.iou == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.precision_empty);
    CHECK(r.precision == 100.0);
  }
  SECTION("hand-built counts TP=6 FP=2 FN=2") {
    // 3x3x1 masks: pred has 8 voxels (6 overlap, 2 extra), gt has 8 (2 missed).
    BinaryMask pred{{1, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 0}};
    BinaryMask gt{{1, 3, 3}, {1, 1, 1, 1, 1, 1, 0, 0, 1}};
    // TP=6, FP=2, FN=2 by direct counting.
    auto r = overlap_metrics(pred, gt);
    CHECK(r.dice == Catch::Approx(75.0));
    CHECK(r.iou == Catch::Approx(60.0));
    CHECK(r.precision == Catch::Approx(75.0));
    CHECK(r.recall == Catch::Approx(75.0));
  }
  SECTION("dice and iou are consistent as fractions") {
    CounterRng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_blob_mask(6, 6, 6, rng);
      auto b = random_blob_mask(6, 6, 6, rng);
      auto r = overlap_metrics(a, b);
      const double dice = r.dice / 100.0, iou = r.iou / 100.0;
      CHECK(dice == Catch::Approx(2 * iou / (1 + iou)).margin(1e-9));
    }
  }
  SECTION("shape mismatch rejected") {
    BinaryMask a{{1, 2, 2}, {0, 0, 0, 0}};
    BinaryMask b{{2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0}};
    CHECK_THROWS_AS(overlap_metrics(a, b), ShapeError);
  }
}

TEST_CASE("hd95 known cases") {
  const Spacing unit{1, 1, 1};
  SECTION("identical masks give zero") {
    BinaryMask m{{2, 2, 2}, {1, 1, 0, 0, 0, 0, 0, 0}};
    auto r = hd95(m, m, unit);
    CHECK(r.defined);
    CHECK(r.mm == 0.0);
  }
  SECTION("single voxels at offset (3,0,0) give exactly 3") {
    BinaryMask a{{5, 3, 3}, std::vector<uint8_t>(45, 0)};
    BinaryMask b = a;
    a.data[static_cast<size_t>((0 * 3 + 1) * 3 + 1)] = 1;
    b.data[static_cast<size_t>((3 * 3 + 1) * 3 + 1)] = 1;
    auto r = hd95(a, b, unit);
    CHECK(r.defined);
    CHECK(r.mm == 3.0);
  }
  SECTION("anisotropic spacing scales the answer") {
    BinaryMask a{{5, 1, 1}, {1, 0, 0, 0, 0}};
    BinaryMask b{{5, 1, 1}, {0, 0, 0, 1, 0}};
    auto r = hd95(a, b, Spacing{2.0, 1.0, 1.0});
    CHECK(r.mm == 6.0);
  }
  SECTION("solid cubes offset along W match the brute-force oracle exactly") {
    BinaryMask a{{5, 5, 7}, std::vector<uint8_t>(175, 0)};
    BinaryMask b = a;
    for (int64_t d = 1; d < 4; ++d)
      for (int64_t h = 1; h < 4; ++h)
        for (int64_t w = 1; w < 4; ++w) {
          a.data[static_cast<size_t>((d * 5 + h) * 7 + w)] = 1;
          b.data[static_cast<size_t>((d * 5 + h) * 7 + w + 2)] = 1;
        }
    auto r = hd95(a, b, unit);
    CHECK(r.defined);
    CHECK(r.mm == Catch::Approx(hd95_bruteforce(a, b, unit)).margin(1e-9));
  }
  SECTION("empty mask makes the result undefined") {
    BinaryMask a{{2, 2, 2}, {1, 0, 0, 0, 0, 0, 0, 0}};
    BinaryMask e{{2, 2, 2}, std::vector<uint8_t>(8, 0)};
    CHECK_FALSE(hd95(a, e, unit).defined);
    CHECK_FALSE(hd95(e, a, unit).defined);
  }
}

TEST_CASE("hd95 equals the brute-force oracle and is symmetric", "[slow]") {
  CounterRng rng(56);
  const Spacing sp{1.5, 1.0, 0.75};
  for (int trial = 0; trial < 25; ++trial) {
    auto a = random_blob_mask(10, 10, 10, rng);
    auto b = random_blob_mask(10, 10, 10, rng);
    auto r1 = hd95(a, b, sp);
    auto r2 = hd95(b, a, sp);
    REQUIRE(r1.defined);
    CHECK(r1.mm == r2.mm);
    CHECK(r1.mm == Catch::Approx(hd95_bruteforce(a, b, sp)).margin(1e-9));
  }
}

TEST_CASE("metrics CSV matches the frozen fixture byte for byte") {
  MetricsReport rep;
  CaseMetrics a;
  a.case_id = "test_000";
  a.overlap = {92.5, 86.0465116279, 91.0, 94.0, false, false, false, false};
  a.hd = {true, 3.25};
  CaseMetrics b;
  b.case_id = "test_001";
  b.overlap = {88.0, 78.5714285714, 90.0, 86.0, false, false, false, false};
  b.hd = {false, 0.0};
  rep.rows = {a, b};

  const std::string expect =
      "case_id,dice,iou,precision,recall,hd95_mm\n"
      "test_000,92.5000,86.0465,91.0000,94.0000,3.2500\n"
      "test_001,88.0000,78.5714,90.0000,86.0000,NA\n"
      "mean,90.2500,82.3090,90.5000,90.0000,3.2500\n"
      "std,2.2500,3.7375,0.5000,4.0000,0.0000\n";
  CHECK(metrics_report_csv(rep) == expect);
}

TEST_CASE("total_loss gradients match finite differences") {
  CounterRng rng(57);
  auto logits = random_tensor_d({1, 2, 2, 2, 2}, rng);
  std::vector<double> gv(2 * 8, 0.0);
  for (int i = 0; i < 8; ++i) gv[static_cast<size_t>(rng.uniform() < 0.5 ? i : 8 + i)] = 1.0;
  auto g = TensorD::from({1, 2, 2, 2, 2}, gv);
  LossConfig cfg;
  auto rep = grad_check(
      [&](const std::vector<TensorD>& in) { return total_loss(softmax(in[0], 1), g, cfg); }, {logits});
  INFO(rep.str());
  CHECK(rep.pass());
}
