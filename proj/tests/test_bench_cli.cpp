#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "vseg/bench.hpp"
#include "vseg/cli.hpp"

using namespace vseg;

namespace {

std::string tmp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vseg_cli_" + name);
  std::filesystem::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("depth_attention analytic cases") {
  CounterRng rng(70);
  const int64_t C = 3;
  auto wq = random_tensor_f({C, C}, rng);
  auto wk = random_tensor_f({C, C}, rng);
  auto wv = random_tensor_f({C, C}, rng);

  SECTION("T=1 output equals the value row") {
    auto seq = random_tensor_f({2, 1, C}, rng);
    auto y = depth_attention(seq, wq, wk, wv);
    auto v = linear(seq, wv);
    for (size_t i = 0; i < y.values().size(); ++i)
      CHECK(y.values()[i] == Catch::Approx(v.values()[i]).margin(1e-6));
  }
  SECTION("zero query weight gives uniform attention = mean of value rows") {
    auto wq0 = TensorF::zeros({C, C});
    auto seq = random_tensor_f({1, 4, C}, rng);
    auto y = depth_attention(seq, wq0, wk, wv);
    auto v = linear(seq, wv);
    for (int64_t c = 0; c < C; ++c) {
      double mean = 0;
      for (int64_t t = 0; t < 4; ++t) mean += v.values()[static_cast<size_t>(t * C + c)];
      mean /= 4;
      for (int64_t t = 0; t < 4; ++t)
        CHECK(y.values()[static_cast<size_t>(t * C + c)] == Catch::Approx(mean).margin(1e-6));
    }
  }
  SECTION("random case matches a direct softmax-matmul oracle") {
    const int64_t N = 1, T = 3, Cc = 2;
    auto q_w = random_tensor_f({Cc, Cc}, rng);
    auto k_w = random_tensor_f({Cc, Cc}, rng);
    auto v_w = random_tensor_f({Cc, Cc}, rng);
    auto seq = random_tensor_f({N, T, Cc}, rng);
    auto y = depth_attention(seq, q_w, k_w, v_w);

    auto q = linear(seq, q_w), k = linear(seq, k_w), v = linear(seq, v_w);
    for (int64_t i = 0; i < T; ++i) {
      double scores[3], denom = 0;
      for (int64_t j = 0; j < T; ++j) {
        double s = 0;
        for (int64_t c = 0; c < Cc; ++c)
          s += q.values()[static_cast<size_t>(i * Cc + c)] * k.values()[static_cast<size_t>(j * Cc + c)];
        scores[j] = std::exp(s / std::sqrt(2.0));
        denom += scores[j];
      }
      for (int64_t c = 0; c < Cc; ++c) {
        double expect = 0;
        for (int64_t j = 0; j < T; ++j) expect += scores[j] / denom * v.values()[static_cast<size_t>(j * Cc + c)];
        CHECK(y.values()[static_cast<size_t>(i * Cc + c)] == Catch::Approx(expect).margin(1e-5));
      }
    }
  }
  SECTION("attention weights are convex combinations") {
    auto seq = random_tensor_f({3, 5, C}, rng);
    auto w = depth_attention_weights(seq, wq, wk);
    for (int64_t n = 0; n < 3; ++n)
      for (int64_t i = 0; i < 5; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 5; ++j) {
          const double v = w.values()[static_cast<size_t>((n * 5 + i) * 5 + j)];
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(s == Catch::Approx(1.0).margin(1e-6));
      }
  }
}

TEST_CASE("bench report shape contract") {
  BenchConfig cfg;
  cfg.depths = {4, 8};
  cfg.repeats = 2;
  cfg.warmup = 1;
  cfg.channels = 8;
  cfg.height = 2;
  cfg.width = 2;
  auto rep = bench_scaling(cfg);
  CHECK(rep.rows.size() == 4);  // |depths| * 2 methods
  for (const auto& r : rep.rows) {
    CHECK(r.mean_s > 0.0);
    CHECK((r.method == "bim_scan" || r.method == "depth_attention"));
  }
  CHECK(rep.find("bim_scan", 4) != nullptr);
  CHECK(rep.find("depth_attention", 8) != nullptr);
  const std::string csv = rep.csv();
  CHECK(csv.rfind("method,depth,mean_s,std_s,peak_bytes\n", 0) == 0);
  CHECK_THROWS_AS(bench_scaling(BenchConfig{{8, 4}}), ConfigError);
}

TEST_CASE("cli gradcheck subcommand", "[slow]") {
  CHECK(run_cli({"gradcheck", "--module", "loss"}) == 0);
}

TEST_CASE("cli usage errors exit 1") {
  CHECK(run_cli({"no-such-command"}) == 1);
  CHECK(run_cli({"generate", "--bogus-flag", "x"}) == 1);
  CHECK(run_cli({}) == 1);
}

TEST_CASE("cli generate/train/eval/predict round trip", "[slow]") {
  const std::string data = tmp_dir("data");
  const std::string run = tmp_dir("run");

  // Small phantoms for speed.
  const std::string spec_file = data + "/spec.cfg";
  {
    std::ofstream f(spec_file);
    f << "# desk-size phantoms\n"
      << "depth=16\nheight=24\nwidth=24\nr_min=2.5\nr_max=5\n";
  }
  CHECK(run_cli({"generate", "--out", data, "--n-train", "3", "--n-val", "1", "--n-test", "2", "--seed", "3",
                 "--spec", spec_file}) == 0);
  CHECK(std::filesystem::exists(data + "/train_000_img.vseg"));
  CHECK(std::filesystem::exists(data + "/test_001_msk.vseg"));

  CHECK(run_cli({"train", "--data", data, "--out", run, "epochs=2", "batch_size=2", "patch=8", "base_width=4",
                 "levels=2", "state_size=4", "ds_weights=0.7,0.3"}) == 0);
  CHECK(std::filesystem::exists(run + "/checkpoint.bgck"));
  const std::string log = slurp(run + "/train_log.csv");
  CHECK(log.rfind("epoch,lr,train_loss,val_dice\n", 0) == 0);

  const std::string report = run + "/metrics.csv";
  CHECK(run_cli({"eval", "--data", data, "--checkpoint", run + "/checkpoint.bgck", "--report", report, "--patch",
                 "8"}) == 0);
  const std::string csv = slurp(report);
  CHECK(csv.rfind("case_id,dice,iou,precision,recall,hd95_mm\n", 0) == 0);
  CHECK(csv.find("test_000") != std::string::npos);
  CHECK(csv.find("mean,") != std::string::npos);
  CHECK(csv.find("std,") != std::string::npos);

  CHECK(run_cli({"predict", "--in", data + "/test_000_img.vseg", "--checkpoint", run + "/checkpoint.bgck",
                 "--out", run + "/pred.vseg", "--patch", "8"}) == 0);
  auto pred = read_vseg(run + "/pred.vseg");
  CHECK(pred.dtype == VsegDtype::u8);
  CHECK(pred.d == 16);

  SECTION("eval with an out-of-range mask label is a named config conflict") {
    // Corrupt one mask with label 2 (num_classes is 2).
    auto msk = read_vseg(data + "/test_000_msk.vseg");
    msk.u8[0] = 2;
    BinaryMask m{{msk.d, msk.h, msk.w}, msk.u8};
    write_vseg_mask(m, msk.spacing, data + "/test_000_msk.vseg");
    CHECK(run_cli({"eval", "--data", data, "--checkpoint", run + "/checkpoint.bgck", "--report", report,
                   "--patch", "8"}) == 2);
  }
}

TEST_CASE("cli bench subcommand writes the pinned CSV", "[slow]") {
  const std::string out = tmp_dir("bench") + "/bench.csv";
  CHECK(run_cli({"bench", "--depths", "4,8", "--repeats", "2", "--out", out}) == 0);
  const std::string csv = slurp(out);
  CHECK(csv.rfind("method,depth,mean_s,std_s,peak_bytes\n", 0) == 0);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 5);  // header + 2 depths * 2 methods
}

TEST_CASE("cli ablate produces the four-variant table", "[slow]") {
  const std::string data = tmp_dir("abdata");
  const std::string out = tmp_dir("about");
  const std::string spec_file = data + "/spec.cfg";
  {
    std::ofstream f(spec_file);
    f << "depth=16\nheight=24\nwidth=24\nr_min=2.5\nr_max=5\n";
  }
  REQUIRE(run_cli({"generate", "--out", data, "--n-train", "2", "--n-val", "1", "--n-test", "1", "--seed", "1",
                   "--spec", spec_file}) == 0);
  CHECK(run_cli({"ablate", "--data", data, "--out", out, "epochs=1", "batch_size=2", "patch=8", "base_width=4",
                 "levels=2", "state_size=4", "ds_weights=0.7,0.3"}) == 0);
  const std::string csv = slurp(out + "/ablation.csv");
  CHECK(csv.rfind("model,dice,iou,recall,precision,hd95_mm\n", 0) == 0);
  CHECK(csv.find("\nB,") != std::string::npos);
  CHECK(csv.find("\nB+BiM,") != std::string::npos);
  CHECK(csv.find("\nB+GeoAttn,") != std::string::npos);
  CHECK(csv.find("\nB+BiM+GeoAttn,") != std::string::npos);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 5);
}
