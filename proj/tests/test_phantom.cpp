#include <catch2/catch_amalgamated.hpp>

#include <queue>
#include <set>

#include "vseg/phantom.hpp"

using namespace vseg;

namespace {

// Flood-fill oracle: number of 26-connected foreground components.
int count_components_26(const BinaryMask& m) {
  const int64_t D = m.dims[0], H = m.dims[1], W = m.dims[2];
  std::vector<uint8_t> seen(m.data.size(), 0);
  int components = 0;
  for (int64_t start = 0; start < D * H * W; ++start) {
    if (!m.data[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
    ++components;
    std::queue<int64_t> q;
    q.push(start);
    seen[static_cast<size_t>(start)] = 1;
    while (!q.empty()) {
      const int64_t i = q.front();
      q.pop();
      const int64_t d = i / (H * W), h = (i / W) % H, w = i % W;
      for (int64_t dd = -1; dd <= 1; ++dd)
        for (int64_t dh = -1; dh <= 1; ++dh)
          for (int64_t dw = -1; dw <= 1; ++dw) {
            if (!dd && !dh && !dw) continue;
            const int64_t nd = d + dd, nh = h + dh, nw = w + dw;
            if (nd < 0 || nd >= D || nh < 0 || nh >= H || nw < 0 || nw >= W) continue;
            const int64_t ni = (nd * H + nh) * W + nw;
            if (m.data[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
              seen[static_cast<size_t>(ni)] = 1;
              q.push(ni);
            }
          }
    }
  }
  return components;
}

}  // namespace

TEST_CASE("gen_phantom is deterministic") {
  PhantomSpec spec;
  auto a = gen_phantom(spec, 42, "case");
  auto b = gen_phantom(spec, 42, "case");
  CHECK(a.image.values() == b.image.values());
  CHECK(a.mask.data == b.mask.data);
  auto c = gen_phantom(spec, 43, "case");
  CHECK(a.mask.data != c.mask.data);
}

TEST_CASE("noise-free phantom has at most three distinct intensities") {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  spec.depth_blur = false;
  auto s = gen_phantom(spec, 7, "case");
  std::set<float> distinct(s.image.values().begin(), s.image.values().end());
  CHECK(distinct.size() <= 3);
  CHECK(distinct.count(static_cast<float>(spec.bg_mean)) == 1);
  CHECK(distinct.count(static_cast<float>(spec.fg_mean)) == 1);
}

TEST_CASE("noise-free interior voxels carry the exact foreground mean") {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  spec.depth_blur = false;
  auto s = gen_phantom(spec, 9, "case");
  const int64_t D = spec.depth, H = spec.height, W = spec.width;
  auto is_fg = [&](int64_t d, int64_t h, int64_t w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return s.mask.at(d, h, w) != 0;
  };
  int checked = 0;
  for (int64_t d = 0; d < D; ++d)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        if (!is_fg(d, h, w)) continue;
        bool interior2 = true;
        for (int64_t dd = -2; dd <= 2 && interior2; ++dd)
          for (int64_t dh = -2; dh <= 2 && interior2; ++dh)
            for (int64_t dw = -2; dw <= 2 && interior2; ++dw)
              if (!is_fg(d + dd, h + dh, w + dw)) interior2 = false;
        if (interior2) {
          CHECK(s.image.values()[static_cast<size_t>((d * H + h) * W + w)] == static_cast<float>(spec.fg_mean));
          ++checked;
        }
      }
  CHECK(checked > 0);
}

TEST_CASE("straight cylinder matches the analytic volume within 10%") {
  PhantomSpec spec;
  spec.depth = 32;
  spec.height = 48;
  spec.width = 48;
  spec.dual_lumen = false;
  spec.noise_sigma = 0.0;
  spec.depth_blur = false;
  std::vector<std::array<double, 3>> ctrl = {
      {0.0, 24.0, 24.0}, {31.0 / 3.0, 24.0, 24.0}, {62.0 / 3.0, 24.0, 24.0}, {31.0, 24.0, 24.0}};
  auto s = rasterize_phantom(spec, ctrl, 4.0, 4.0, 0.0, 0.0, 123, "cyl");
  const double expect = M_PI * 16.0 * 32.0;  // pi r^2 D = 1608.5
  const double got = static_cast<double>(s.mask.count());
  CHECK(std::abs(got - expect) / expect <= 0.10);
}

TEST_CASE("mask connectivity matches the lumen layout") {
  SECTION("single lumen is one 26-connected component") {
    PhantomSpec spec;
    spec.dual_lumen = false;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      auto s = gen_phantom(spec, seed, "single");
      CHECK(count_components_26(s.mask) == 1);
    }
  }
  SECTION("dual lumen gives exactly two components split by the membrane") {
    PhantomSpec spec;
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
      auto s = gen_phantom(spec, seed, "dual");
      CHECK(count_components_26(s.mask) == 2);
    }
  }
}

TEST_CASE("foreground fraction stays inside the contract") {
  PhantomSpec spec;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto s = gen_phantom(spec, seed, "frac");
    const double frac =
        static_cast<double>(s.mask.count()) / static_cast<double>(spec.depth * spec.height * spec.width);
    CHECK(frac >= 0.005);
    CHECK(frac <= 0.30);
  }
}

TEST_CASE("gen_dataset splits are disjoint and reproducible") {
  PhantomSpec spec;
  spec.depth = 24;
  spec.height = 32;
  spec.width = 32;
  spec.r_min = 3;
  spec.r_max = 6;
  auto ds = gen_dataset(spec, 3, 2, 2, 77);
  std::set<std::string> ids;
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& s : *split) CHECK(ids.insert(s.case_id).second);
  CHECK(ids.size() == 7);

  auto ds2 = gen_dataset(spec, 3, 2, 2, 77);
  CHECK(ds.train[0].image.values() == ds2.train[0].image.values());
  CHECK(ds.test[1].mask.data == ds2.test[1].mask.data);
}

TEST_CASE("phantom spec invariants are enforced") {
  PhantomSpec spec;
  spec.r_min = 0;
  CHECK_THROWS_AS(gen_phantom(spec, 1, "bad"), ConfigError);
  spec = PhantomSpec{};
  spec.r_max = 20;  // >= min(H,W)/4 with 48-wide volumes
  CHECK_THROWS_AS(gen_phantom(spec, 1, "bad"), ConfigError);
  spec = PhantomSpec{};
  spec.membrane_mean = 0.2;  // violates bg < membrane < fg
  CHECK_THROWS_AS(gen_phantom(spec, 1, "bad"), ConfigError);
}

TEST_CASE("noise is keyed by voxel index") {
  PhantomSpec spec;
  spec.depth_blur = false;
  auto a = gen_phantom(spec, 5, "a");
  // Same seed, same voxel -> same value; different voxels differ.
  auto b = gen_phantom(spec, 5, "b");
  CHECK(a.image.values() == b.image.values());
  CHECK(a.image.values()[0] != a.image.values()[1]);
}
