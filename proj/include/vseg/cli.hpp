#ifndef VSEG_CLI_HPP
#define VSEG_CLI_HPP

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "vseg/bench.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/gradcheck_suite.hpp"
#include "vseg/phantom.hpp"
#include "vseg/trainer.hpp"
#include "vseg/volume_io.hpp"

// Command-line entry point: generate / train / eval / predict / gradcheck /
// bench / ablate. Exit 0 on success, 1 on usage errors, 2 on runtime or
// parse failures.

namespace vseg {

namespace cli_detail {

inline void write_sample(const std::string& dir, const VolumeSample& s) {
  write_vseg_image(s.image, s.spacing, dir + "/" + s.case_id + "_img.vseg");
  write_vseg_mask(s.mask, s.spacing, dir + "/" + s.case_id + "_msk.vseg");
}

inline VolumeSample load_sample(const std::string& dir, const std::string& case_id) {
  VolumeSample s;
  s.case_id = case_id;
  VsegVolume img = read_vseg(dir + "/" + case_id + "_img.vseg");
  if (img.dtype != VsegDtype::f32) throw Error("image file for case " + case_id + " is not float32");
  s.image = TensorF::from({img.d, img.h, img.w}, std::move(img.f32));
  s.spacing = img.spacing;
  VsegVolume msk = read_vseg(dir + "/" + case_id + "_msk.vseg");
  if (msk.dtype != VsegDtype::u8) throw Error("mask file for case " + case_id + " is not uint8");
  if (msk.d != img.d || msk.h != img.h || msk.w != img.w)
    throw Error("image/mask extents differ for case " + case_id);
  s.mask.dims = {msk.d, msk.h, msk.w};
  s.mask.data = std::move(msk.u8);
  return s;
}

inline std::vector<VolumeSample> load_split(const std::string& dir, const std::string& prefix) {
  namespace fs = std::filesystem;
  std::vector<std::string> ids;
  const std::string suffix = "_img.vseg";
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<VolumeSample> out;
  for (const auto& id : ids) out.push_back(load_sample(dir, id));
  return out;
}

inline void apply_phantom_kv(PhantomSpec& s, const std::string& k, const std::string& v) {
  auto to_i = [&] { return static_cast<int64_t>(std::stoll(v)); };
  auto to_d = [&] { return std::stod(v); };
  auto to_b = [&] { return v == "1" || v == "true"; };
  if (k == "depth")
    s.depth = to_i();
  else if (k == "height")
    s.height = to_i();
  else if (k == "width")
    s.width = to_i();
  else if (k == "spacing_z")
    s.spacing.z = to_d();
  else if (k == "spacing_y")
    s.spacing.y = to_d();
  else if (k == "spacing_x")
    s.spacing.x = to_d();
  else if (k == "r_min")
    s.r_min = to_d();
  else if (k == "r_max")
    s.r_max = to_d();
  else if (k == "ctrl_points")
    s.ctrl_points = static_cast<int>(to_i());
  else if (k == "dual_lumen")
    s.dual_lumen = to_b();
  else if (k == "membrane_thickness")
    s.membrane_thickness = to_d();
  else if (k == "fg_mean")
    s.fg_mean = to_d();
  else if (k == "bg_mean")
    s.bg_mean = to_d();
  else if (k == "membrane_mean")
    s.membrane_mean = to_d();
  else if (k == "noise_sigma")
    s.noise_sigma = to_d();
  else if (k == "depth_blur")
    s.depth_blur = to_b();
  else
    throw ConfigError("unknown phantom spec key '" + k + "'");
}

inline void apply_train_kv(TrainConfig& t, ModelConfig& m, const std::string& k, const std::string& v) {
  auto to_i = [&] { return static_cast<int64_t>(std::stoll(v)); };
  auto to_d = [&] { return std::stod(v); };
  if (k == "epochs")
    t.epochs = to_i();
  else if (k == "batch_size")
    t.batch_size = to_i();
  else if (k == "patch")
    t.patch = {to_i(), to_i(), to_i()};
  else if (k == "patch_d")
    t.patch[0] = to_i();
  else if (k == "patch_h")
    t.patch[1] = to_i();
  else if (k == "patch_w")
    t.patch[2] = to_i();
  else if (k == "lr0")
    t.lr0 = to_d();
  else if (k == "lr_min")
    t.lr_min = to_d();
  else if (k == "momentum")
    t.momentum = to_d();
  else if (k == "p_fg")
    t.p_fg = to_d();
  else if (k == "seed")
    t.seed = static_cast<uint64_t>(std::stoull(v));
  else if (k == "val_overlap")
    t.val_overlap = to_d();
  else if (k == "lambda_dice")
    t.loss.lambda_dice = to_d();
  else if (k == "lambda_ce")
    t.loss.lambda_ce = to_d();
  else if (k == "epsilon")
    t.loss.epsilon = to_d();
  else if (k == "clamp_floor")
    t.loss.clamp_floor = to_d();
  else if (k == "ds_weights") {
    t.ds_weights.clear();
    size_t pos = 0;
    while (pos <= v.size()) {
      size_t comma = v.find(',', pos);
      if (comma == std::string::npos) comma = v.size();
      t.ds_weights.push_back(std::stod(v.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  } else {
    uint64_t dummy_seed = 0;
    detail::apply_model_kv(m, dummy_seed, k, v);
  }
}

inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return detail::parse_kv_lines(text);
}

inline void apply_train_config(TrainConfig& t, ModelConfig& m, const std::string& config_path,
                               const std::vector<std::string>& overrides) {
  if (!config_path.empty())
    for (const auto& [k, v] : read_config_file(config_path)) apply_train_kv(t, m, k, v);
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value, got '" + kv + "'");
    apply_train_kv(t, m, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

inline MetricsReport evaluate_model(const SegModel<float>& model, const std::vector<VolumeSample>& samples,
                                    const std::array<int64_t, 3>& patch, double overlap) {
  MetricsReport rep;
  for (const auto& s : samples) {
    for (uint8_t v : s.mask.data)
      if (v >= model.cfg.num_classes)
        throw Error("config conflict: mask label " + std::to_string(v) + " in case " + s.case_id +
                    " exceeds checkpoint num_classes=" + std::to_string(model.cfg.num_classes));
    BinaryMask pred = predict_volume(model, s.image, patch, overlap);
    CaseMetrics cm;
    cm.case_id = s.case_id;
    cm.overlap = overlap_metrics(pred, s.mask);
    cm.hd = hd95(pred, s.mask, s.spacing);
    rep.rows.push_back(std::move(cm));
  }
  return rep;
}

struct AblationRow {
  std::string model;
  double dice = 0, iou = 0, recall = 0, precision = 0;
  bool hd_defined = false;
  double hd = 0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "model,dice,iou,recall,precision,hd95_mm\n";
  char buf[200];
  for (const auto& r : rows) {
    if (r.hd_defined)
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f\n", r.model.c_str(), r.dice, r.iou, r.recall,
                    r.precision, r.hd);
    else
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,NA\n", r.model.c_str(), r.dice, r.iou, r.recall,
                    r.precision);
    s += buf;
  }
  return s;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"vseg: depth-coherent 3D vessel segmentation on synthetic phantoms"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a phantom dataset as VSEG files");
  std::string gen_out, gen_spec_file;
  int64_t gen_train = 30, gen_val = 4, gen_test = 8;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-train", gen_train, "training phantom count");
  gen->add_option("--n-val", gen_val, "validation phantom count");
  gen->add_option("--n-test", gen_test, "test phantom count");
  gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--spec", gen_spec_file, "phantom spec file (key=value lines)");

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  std::string tr_data, tr_out, tr_config;
  std::vector<std::string> tr_overrides;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--config", tr_config, "config file (key=value lines)");
  tr->add_option("overrides", tr_overrides, "key=value overrides");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write a metrics CSV");
  std::string ev_data, ev_ckpt, ev_report, ev_split = "test";
  double ev_overlap = 0.25;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--report", ev_report, "metrics CSV output path")->required();
  ev->add_option("--split", ev_split, "dataset split prefix (default test)");
  ev->add_option("--overlap", ev_overlap, "sliding-window overlap fraction");
  int64_t ev_patch = 32;
  ev->add_option("--patch", ev_patch, "cubic patch extent");

  // predict
  auto* pr = app.add_subcommand("predict", "Segment one volume (.vseg or .nii)");
  std::string pr_in, pr_ckpt, pr_out;
  double pr_overlap = 0.25;
  pr->add_option("--in", pr_in, "input volume")->required();
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--out", pr_out, "output mask path (.vseg)")->required();
  pr->add_option("--overlap", pr_overlap, "sliding-window overlap fraction");
  int64_t pr_patch = 32;
  pr->add_option("--patch", pr_patch, "cubic patch extent");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string gc_module = "all";
  gc->add_option("--module", gc_module, "all|tensor|bim|geoattn|loss");

  // bench
  auto* be = app.add_subcommand("bench", "Depth-scaling benchmark (BiM scan vs depth attention)");
  std::vector<int64_t> be_depths = {16, 32, 64, 128};
  std::string be_out;
  int be_repeats = 5;
  be->add_option("--depths", be_depths, "depths to time")->delimiter(',');
  be->add_option("--repeats", be_repeats, "timed repeats per row");
  be->add_option("--out", be_out, "CSV output path (default stdout)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train B / B+BiM / B+GeoAttn / B+BiM+GeoAttn and compare");
  std::string ab_data, ab_out, ab_config;
  std::vector<std::string> ab_overrides;
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--config", ab_config, "config file (key=value lines)");
  ab->add_option("overrides", ab_overrides, "key=value overrides");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      PhantomSpec spec;
      if (!gen_spec_file.empty())
        for (const auto& [k, v] : cli_detail::read_config_file(gen_spec_file))
          cli_detail::apply_phantom_kv(spec, k, v);
      std::filesystem::create_directories(gen_out);
      Dataset ds = gen_dataset(spec, gen_train, gen_val, gen_test, gen_seed);
      for (const auto& s : ds.train) cli_detail::write_sample(gen_out, s);
      for (const auto& s : ds.val) cli_detail::write_sample(gen_out, s);
      for (const auto& s : ds.test) cli_detail::write_sample(gen_out, s);
      std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size() << " val / " << ds.test.size()
                << " test phantoms to " << gen_out << "\n";
      return 0;
    }

    if (*tr) {
      TrainConfig tcfg;
      ModelConfig mcfg;
      cli_detail::apply_train_config(tcfg, mcfg, tr_config, tr_overrides);
      auto train_set = cli_detail::load_split(tr_data, "train_");
      auto val_set = cli_detail::load_split(tr_data, "val_");
      if (train_set.empty() || val_set.empty())
        throw Error("no train_*/val_* cases found in " + tr_data);
      std::filesystem::create_directories(tr_out);
      SegModel<float> model = build_model<float>(mcfg, tcfg.seed);
      TrainResult res = train(model, train_set, val_set, tcfg);
      save_checkpoint(model, tr_out + "/checkpoint.bgck");
      detail::write_file(tr_out + "/train_log.csv", res.log_csv());
      std::cout << "best val dice " << res.best_val_dice << "% at epoch " << res.best_epoch << "\n";
      return 0;
    }

    if (*ev) {
      SegModel<float> model = load_checkpoint(ev_ckpt);
      if (model.cfg.in_channels != 1)
        throw Error("config conflict: checkpoint expects " + std::to_string(model.cfg.in_channels) +
                    " input channels, VSEG images have 1");
      auto samples = cli_detail::load_split(ev_data, ev_split + "_");
      if (samples.empty()) throw Error("no " + ev_split + "_* cases found in " + ev_data);
      MetricsReport rep =
          cli_detail::evaluate_model(model, samples, {ev_patch, ev_patch, ev_patch}, ev_overlap);
      detail::write_file(ev_report, metrics_report_csv(rep));
      std::cout << "wrote " << ev_report << " (" << rep.rows.size() << " cases)\n";
      return 0;
    }

    if (*pr) {
      SegModel<float> model = load_checkpoint(pr_ckpt);
      TensorF volume;
      Spacing spacing;
      if (pr_in.size() > 4 && pr_in.compare(pr_in.size() - 4, 4, ".nii") == 0) {
        NiftiVolume nv = read_nifti(pr_in);
        volume = nv.volume;
        spacing = nv.spacing;
      } else {
        VsegVolume vv = read_vseg(pr_in);
        if (vv.dtype != VsegDtype::f32) throw Error("predict: input VSEG must be a float32 image");
        volume = TensorF::from({vv.d, vv.h, vv.w}, std::move(vv.f32));
        spacing = vv.spacing;
      }
      BinaryMask pred = predict_volume(model, volume, {pr_patch, pr_patch, pr_patch}, pr_overlap);
      export_prediction(pred, spacing, pr_out);
      std::cout << "wrote " << pr_out << " (" << pred.count() << " foreground voxels)\n";
      return 0;
    }

    if (*gc) {
      auto checks = gradcheck_suite::run(gc_module);
      bool all_pass = true;
      for (const auto& c : checks) {
        std::cout << (c.report.pass() ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.report.str() << "\n";
        all_pass = all_pass && c.report.pass();
      }
      return all_pass ? 0 : 2;
    }

    if (*be) {
      BenchConfig bcfg;
      bcfg.depths = be_depths;
      bcfg.repeats = be_repeats;
      BenchReport rep = bench_scaling(bcfg);
      if (be_out.empty()) {
        std::cout << rep.csv();
      } else {
        detail::write_file(be_out, rep.csv());
        for (size_t i = 0; i + 1 < bcfg.depths.size(); ++i) {
          const int64_t d = bcfg.depths[i];
          if (rep.find("bim_scan", 2 * d))
            std::cout << "t(" << 2 * d << ")/t(" << d << "): bim_scan " << rep.doubling_ratio("bim_scan", d)
                      << ", depth_attention " << rep.doubling_ratio("depth_attention", d) << "\n";
        }
      }
      return 0;
    }

    if (*ab) {
      TrainConfig tcfg;
      ModelConfig mcfg;
      cli_detail::apply_train_config(tcfg, mcfg, ab_config, ab_overrides);
      auto train_set = cli_detail::load_split(ab_data, "train_");
      auto val_set = cli_detail::load_split(ab_data, "val_");
      auto test_set = cli_detail::load_split(ab_data, "test_");
      if (train_set.empty() || val_set.empty() || test_set.empty())
        throw Error("ablate: need train_*/val_*/test_* cases in " + ab_data);
      std::filesystem::create_directories(ab_out);

      const std::array<std::pair<std::string, std::pair<bool, bool>>, 4> variants{{
          {"B", {false, false}},
          {"B+BiM", {true, false}},
          {"B+GeoAttn", {false, true}},
          {"B+BiM+GeoAttn", {true, true}},
      }};
      std::vector<cli_detail::AblationRow> rows;
      for (const auto& [name, toggles] : variants) {
        ModelConfig vcfg = mcfg;
        vcfg.use_bim = toggles.first;
        vcfg.use_geoattn = toggles.second;
        SegModel<float> model = build_model<float>(vcfg, tcfg.seed);
        TrainResult res = train(model, train_set, val_set, tcfg);
        std::string tag = name;
        for (auto& ch : tag)
          if (ch == '+') ch = '_';
        save_checkpoint(model, ab_out + "/" + tag + ".bgck");
        detail::write_file(ab_out + "/" + tag + "_log.csv", res.log_csv());

        MetricsReport rep = cli_detail::evaluate_model(model, test_set, tcfg.patch, 0.25);
        cli_detail::AblationRow row;
        row.model = name;
        int64_t hd_n = 0;
        for (const auto& c : rep.rows) {
          row.dice += c.overlap.dice;
          row.iou += c.overlap.iou;
          row.recall += c.overlap.recall;
          row.precision += c.overlap.precision;
          if (c.hd.defined) {
            row.hd += c.hd.mm;
            ++hd_n;
          }
        }
        const double n = static_cast<double>(rep.rows.size());
        row.dice /= n;
        row.iou /= n;
        row.recall /= n;
        row.precision /= n;
        row.hd_defined = hd_n > 0;
        if (hd_n > 0) row.hd /= static_cast<double>(hd_n);
        rows.push_back(row);
        std::cout << name << ": test dice " << row.dice << "%\n";
      }
      detail::write_file(ab_out + "/ablation.csv", cli_detail::ablation_csv(rows));
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.push_back("vseg");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : full) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vseg

#endif  // VSEG_CLI_HPP
