#ifndef VSEG_GRADCHECK_SUITE_HPP
#define VSEG_GRADCHECK_SUITE_HPP

#include <string>
#include <vector>

#include "vseg/geo_attn.hpp"
#include "vseg/grad_check.hpp"
#include "vseg/loss_metrics.hpp"
#include "vseg/ssm.hpp"

// Float64 finite-difference checks for every differentiable primitive and for
// the composed modules. Shared by the gradcheck CLI subcommand and the
// acceptance suite.

namespace vseg {

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

namespace gradcheck_suite {

inline std::vector<NamedGradCheck> tensor_primitives() {
  std::vector<NamedGradCheck> out;
  CounterRng rng(31337);
  auto rnd = [&](Shape s) { return random_tensor_d(std::move(s), rng); };

  out.push_back({"add", grad_check([](const std::vector<TensorD>& in) { return add(in[0], in[1]); },
                                   {rnd({2, 3}), rnd({2, 3})})});
  out.push_back({"add_scalar_broadcast",
                 grad_check([](const std::vector<TensorD>& in) { return add(in[0], in[1]); },
                            {rnd({2, 3}), rnd({1})})});
  out.push_back({"sub", grad_check([](const std::vector<TensorD>& in) { return sub(in[0], in[1]); },
                                   {rnd({2, 3}), rnd({2, 3})})});
  out.push_back({"mul", grad_check([](const std::vector<TensorD>& in) { return mul(in[0], in[1]); },
                                   {rnd({2, 3}), rnd({2, 3})})});
  out.push_back({"mul_scalar_broadcast",
                 grad_check([](const std::vector<TensorD>& in) { return mul(in[1], in[0]); },
                            {rnd({2, 3}), rnd({1})})});
  out.push_back({"div", grad_check([](const std::vector<TensorD>& in) { return div(in[0], in[1]); },
                                   {rnd({2, 3}), random_tensor_d({2, 3}, rng, 0.5, 2.0)})});
  out.push_back({"scale", grad_check([](const std::vector<TensorD>& in) { return scale(in[0], -1.7); },
                                     {rnd({2, 3})})});
  out.push_back({"negate", grad_check([](const std::vector<TensorD>& in) { return negate(in[0]); },
                                      {rnd({2, 3})})});
  out.push_back({"exp", grad_check([](const std::vector<TensorD>& in) { return vseg::exp(in[0]); },
                                   {rnd({2, 3})})});
  out.push_back({"log", grad_check([](const std::vector<TensorD>& in) { return vseg::log(in[0]); },
                                   {random_tensor_d({2, 3}, rng, 0.2, 3.0)})});
  out.push_back({"sigmoid", grad_check([](const std::vector<TensorD>& in) { return sigmoid(in[0]); },
                                       {rnd({2, 3})})});
  out.push_back({"relu", grad_check([](const std::vector<TensorD>& in) { return relu(in[0]); },
                                    {rnd({2, 3})})});
  out.push_back({"silu", grad_check([](const std::vector<TensorD>& in) { return silu(in[0]); },
                                    {rnd({2, 3})})});
  out.push_back({"softplus", grad_check([](const std::vector<TensorD>& in) { return softplus(in[0]); },
                                        {rnd({2, 3})})});
  out.push_back({"clamp", grad_check([](const std::vector<TensorD>& in) { return clamp(in[0], -0.5, 0.5); },
                                     {rnd({3, 3})})});
  out.push_back({"linear", grad_check([](const std::vector<TensorD>& in) { return linear(in[0], in[1], in[2]); },
                                      {rnd({3, 3}), rnd({2, 3}), rnd({2})})});
  out.push_back({"conv3d",
                 grad_check([](const std::vector<TensorD>& in) { return conv3d(in[0], in[1], in[2]); },
                            {rnd({1, 1, 2, 3, 3}), rnd({1, 1, 1, 3, 3}), rnd({1})})});
  out.push_back({"conv3d_multichannel",
                 grad_check([](const std::vector<TensorD>& in) { return conv3d(in[0], in[1], in[2]); },
                            {rnd({2, 3, 3, 3, 3}), rnd({2, 3, 3, 3, 3}), rnd({2})})});
  out.push_back({"conv3d_stride2",
                 grad_check([](const std::vector<TensorD>& in) { return conv3d(in[0], in[1], in[2], 2); },
                            {rnd({1, 2, 4, 4, 4}), rnd({2, 2, 3, 3, 3}), rnd({2})})});
  out.push_back({"reduce_sum",
                 grad_check([](const std::vector<TensorD>& in) { return reduce_sum(in[0], {0, 2}); },
                            {rnd({2, 3, 4})})});
  out.push_back({"reduce_mean",
                 grad_check([](const std::vector<TensorD>& in) { return reduce_mean(in[0], {1}, true); },
                            {rnd({2, 3, 4})})});
  out.push_back({"reduce_max",
                 grad_check([](const std::vector<TensorD>& in) { return reduce_max(in[0], {1, 2}); },
                            {rnd({2, 3, 4})})});
  out.push_back({"instance_norm",
                 grad_check([](const std::vector<TensorD>& in) { return instance_norm(in[0], 1e-5); },
                            {rnd({2, 2, 2, 3, 3})})});
  out.push_back({"layer_norm_channels",
                 grad_check(
                     [](const std::vector<TensorD>& in) { return layer_norm_channels(in[0], 1e-5, in[1], in[2]); },
                     {rnd({2, 3, 2, 2, 2}), rnd({3}), rnd({3})})});
  out.push_back({"softmax", grad_check([](const std::vector<TensorD>& in) { return softmax(in[0], 1); },
                                       {rnd({2, 3, 4})})});
  out.push_back({"reshape_permute_reverse",
                 grad_check(
                     [](const std::vector<TensorD>& in) {
                       return reverse_axis(permute(reshape(in[0], {3, 2, 4}), {2, 0, 1}), 1);
                     },
                     {rnd({2, 3, 4})})});
  out.push_back({"concat_narrow",
                 grad_check(
                     [](const std::vector<TensorD>& in) {
                       return narrow(concat(in[0], in[1], 1), 1, 1, 3);
                     },
                     {rnd({2, 2, 2}), rnd({2, 3, 2})})});
  out.push_back({"upsample_nearest",
                 grad_check([](const std::vector<TensorD>& in) { return upsample_nearest(in[0], 2); },
                            {rnd({1, 2, 2, 2, 2})})});
  out.push_back({"broadcast_channel",
                 grad_check([](const std::vector<TensorD>& in) { return broadcast_channel(in[0], 3); },
                            {rnd({2, 1, 2, 2, 2})})});
  out.push_back({"broadcast_spatial",
                 grad_check([](const std::vector<TensorD>& in) { return broadcast_spatial(in[0], 2, 3, 2); },
                            {rnd({2, 3})})});
  out.push_back({"depthwise_causal_conv1d",
                 grad_check([](const std::vector<TensorD>& in) { return depthwise_causal_conv1d(in[0], in[1]); },
                            {rnd({2, 4, 3}), rnd({3, 3})})});
  {
    // scan_core with a strictly negative A and positive delta.
    auto u = rnd({2, 4, 3});
    auto delta = random_tensor_d({2, 4, 3}, rng, 0.05, 0.8);
    auto bseq = rnd({2, 4, 2});
    auto cseq = rnd({2, 4, 2});
    auto a = random_tensor_d({3, 2}, rng, -2.0, -0.2);
    auto dskip = rnd({3});
    out.push_back({"scan_core",
                   grad_check(
                       [](const std::vector<TensorD>& in) {
                         return scan_core(in[0], in[1], in[2], in[3], in[4], in[5]);
                       },
                       {u, delta, bseq, cseq, a, dskip})});
  }
  return out;
}

inline std::vector<NamedGradCheck> bim_module() {
  std::vector<NamedGradCheck> out;
  CounterRng rng(777);
  SsmConfig scfg;
  scfg.state_size = 4;
  BiMParams<double> p = bim_init<double>(4, scfg, rng);
  // Zero-initialized projections would hide gradient paths; perturb them.
  for (auto* t : {&p.ssm.out_proj, &p.mlp_w2})
    for (auto& v : t->mutable_values()) v = rng.uniform(-0.3, 0.3);

  TensorD x = random_tensor_d({1, 4, 4, 2, 2}, rng);
  std::vector<TensorD> inputs = {x,          p.ssm.in_proj, p.ssm.depth_conv, p.ssm.a_log, p.ssm.d_skip,
                                 p.ssm.delta_w, p.ssm.delta_b, p.ssm.b_w,        p.ssm.c_w,   p.ssm.out_proj,
                                 p.norm_gain,   p.norm_shift,  p.mlp_w1,         p.mlp_w2};
  out.push_back({"bim_forward", grad_check(
                                    [&p](const std::vector<TensorD>& in) {
                                      BiMParams<double> q = p;
                                      q.ssm.in_proj = in[1];
                                      q.ssm.depth_conv = in[2];
                                      q.ssm.a_log = in[3];
                                      q.ssm.d_skip = in[4];
                                      q.ssm.delta_w = in[5];
                                      q.ssm.delta_b = in[6];
                                      q.ssm.b_w = in[7];
                                      q.ssm.c_w = in[8];
                                      q.ssm.out_proj = in[9];
                                      q.norm_gain = in[10];
                                      q.norm_shift = in[11];
                                      q.mlp_w1 = in[12];
                                      q.mlp_w2 = in[13];
                                      return bim_forward(in[0], q);
                                    },
                                    inputs)});
  return out;
}

inline std::vector<NamedGradCheck> geo_module() {
  std::vector<NamedGradCheck> out;
  CounterRng rng(888);
  GeoAttnParams<double> p = geo_init<double>(4, rng);
  for (auto& v : p.gamma.mutable_values()) v = 0.5;  // exercise the gate path
  for (auto* t : {&p.b_xy, &p.b_yz, &p.b_xz, &p.b_3d, &p.fuse_b, &p.sp_reduce_b, &p.sp_expand_b})
    for (auto& v : t->mutable_values()) v = rng.uniform(-0.2, 0.2);

  TensorD x = random_tensor_d({1, 4, 4, 4, 4}, rng);
  std::vector<TensorD> inputs = {x,       p.k_xy,        p.b_xy,        p.k_yz,        p.b_yz,        p.k_xz,
                                 p.b_xz,  p.k_3d,        p.b_3d,        p.fuse_w,      p.fuse_b,      p.sp_reduce_w,
                                 p.sp_reduce_b, p.sp_expand_w, p.sp_expand_b, p.gamma, p.ch_w1, p.ch_w2};
  out.push_back({"geo_attn_forward", grad_check(
                                         [&p](const std::vector<TensorD>& in) {
                                           GeoAttnParams<double> q = p;
                                           q.k_xy = in[1];
                                           q.b_xy = in[2];
                                           q.k_yz = in[3];
                                           q.b_yz = in[4];
                                           q.k_xz = in[5];
                                           q.b_xz = in[6];
                                           q.k_3d = in[7];
                                           q.b_3d = in[8];
                                           q.fuse_w = in[9];
                                           q.fuse_b = in[10];
                                           q.sp_reduce_w = in[11];
                                           q.sp_reduce_b = in[12];
                                           q.sp_expand_w = in[13];
                                           q.sp_expand_b = in[14];
                                           q.gamma = in[15];
                                           q.ch_w1 = in[16];
                                           q.ch_w2 = in[17];
                                           return geo_attn_forward(in[0], q);
                                         },
                                         inputs)});
  return out;
}

inline std::vector<NamedGradCheck> loss_module() {
  std::vector<NamedGradCheck> out;
  CounterRng rng(999);
  TensorD logits = random_tensor_d({1, 2, 3, 3, 3}, rng);
  std::vector<double> gv(static_cast<size_t>(numel({1, 2, 3, 3, 3})), 0.0);
  for (int64_t i = 0; i < 27; ++i) {
    const bool fg = rng.uniform() < 0.5;
    gv[static_cast<size_t>(fg ? 27 + i : i)] = 1.0;
  }
  TensorD g = TensorD::from({1, 2, 3, 3, 3}, gv);
  LossConfig cfg;

  out.push_back({"dice_loss", grad_check(
                                  [&](const std::vector<TensorD>& in) {
                                    return dice_loss(softmax(in[0], 1), g, cfg.epsilon);
                                  },
                                  {logits})});
  out.push_back({"ce_loss", grad_check(
                                [&](const std::vector<TensorD>& in) {
                                  return ce_loss(softmax(in[0], 1), g, cfg.clamp_floor);
                                },
                                {logits})});
  out.push_back({"total_loss", grad_check(
                                   [&](const std::vector<TensorD>& in) {
                                     return total_loss(softmax(in[0], 1), g, cfg);
                                   },
                                   {logits})});
  return out;
}

inline std::vector<NamedGradCheck> run(const std::string& module) {
  std::vector<NamedGradCheck> all;
  auto extend = [&](std::vector<NamedGradCheck> v) {
    for (auto& e : v) all.push_back(std::move(e));
  };
  if (module == "all" || module == "tensor") extend(tensor_primitives());
  if (module == "all" || module == "bim") extend(bim_module());
  if (module == "all" || module == "geoattn") extend(geo_module());
  if (module == "all" || module == "loss") extend(loss_module());
  if (all.empty()) throw ConfigError("gradcheck: unknown module '" + module + "'");
  return all;
}

}  // namespace gradcheck_suite

}  // namespace vseg

#endif  // VSEG_GRADCHECK_SUITE_HPP
