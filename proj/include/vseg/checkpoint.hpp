#ifndef VSEG_CHECKPOINT_HPP
#define VSEG_CHECKPOINT_HPP

#include <map>
#include <string>
#include <vector>

#include "vseg/seg_net.hpp"
#include "vseg/volume_io.hpp"

// Checkpoint format:
//   magic "BGCK" | version u32 = 1
//   | config block: u32 byte length, then key=value lines
//   | per-parameter records: name len u32, name bytes, dtype u8 (0=f32),
//     rank u8, extents u32 each, raw little-endian data
// Round-trips must be bit-exact.

namespace vseg {

namespace detail {

inline std::string config_to_kv(const ModelConfig& c, uint64_t seed) {
  std::string s;
  auto kv = [&](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  kv("in_channels", std::to_string(c.in_channels));
  kv("num_classes", std::to_string(c.num_classes));
  kv("base_width", std::to_string(c.base_width));
  kv("levels", std::to_string(c.levels));
  kv("use_bim", c.use_bim ? "1" : "0");
  kv("use_geoattn", c.use_geoattn ? "1" : "0");
  kv("deep_supervision", c.deep_supervision ? "1" : "0");
  kv("state_size", std::to_string(c.ssm.state_size));
  kv("expand", std::to_string(c.ssm.expand));
  kv("mlp_ratio", std::to_string(c.ssm.mlp_ratio));
  kv("conv_kernel", std::to_string(c.ssm.conv_kernel));
  kv("seed", std::to_string(seed));
  return s;
}

inline std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t')) line.pop_back();
    size_t b = 0;
    while (b < line.size() && (line[b] == ' ' || line[b] == '\t')) ++b;
    line = line.substr(b);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("bad key=value line: '" + line + "'");
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

inline void apply_model_kv(ModelConfig& c, uint64_t& seed, const std::string& k, const std::string& v) {
  auto to_i = [&](void) { return static_cast<int64_t>(std::stoll(v)); };
  auto to_b = [&](void) { return v == "1" || v == "true"; };
  if (k == "in_channels")
    c.in_channels = to_i();
  else if (k == "num_classes")
    c.num_classes = to_i();
  else if (k == "base_width")
    c.base_width = to_i();
  else if (k == "levels")
    c.levels = to_i();
  else if (k == "use_bim")
    c.use_bim = to_b();
  else if (k == "use_geoattn")
    c.use_geoattn = to_b();
  else if (k == "deep_supervision")
    c.deep_supervision = to_b();
  else if (k == "state_size")
    c.ssm.state_size = to_i();
  else if (k == "expand")
    c.ssm.expand = to_i();
  else if (k == "mlp_ratio")
    c.ssm.mlp_ratio = to_i();
  else if (k == "conv_kernel")
    c.ssm.conv_kernel = to_i();
  else if (k == "seed")
    seed = static_cast<uint64_t>(std::stoull(v));
  else
    throw ConfigError("unknown model config key '" + k + "'");
}

}  // namespace detail

inline void save_checkpoint(const SegModel<float>& m, const std::string& path) {
  std::string s = "BGCK";
  detail::put_u32(s, 1);
  const std::string cfg = detail::config_to_kv(m.cfg, m.seed);
  detail::put_u32(s, static_cast<uint32_t>(cfg.size()));
  s += cfg;
  for (const auto& [name, t] : m.params) {
    detail::put_u32(s, static_cast<uint32_t>(name.size()));
    s += name;
    s.push_back(0);  // dtype: float32
    s.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(s, static_cast<uint32_t>(t.dim(i)));
    s.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.size()) * 4);
  }
  detail::write_file(path, s);
}

inline SegModel<float> load_checkpoint(const std::string& path) {
  const auto buf = detail::read_file(path);
  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), "BGCK", 4) != 0)
    throw ParseError(ParseError::Kind::BadMagic, 0, "bad magic, not a checkpoint file");
  r.pos = 4;
  const uint32_t version = r.u32("version");
  if (version != 1)
    throw ParseError(ParseError::Kind::BadVersion, 4, "unsupported checkpoint version " + std::to_string(version));
  const uint32_t cfg_len = r.u32("config length");
  r.need(cfg_len, "config block");
  const std::string cfg_text(reinterpret_cast<const char*>(buf.data() + r.pos), cfg_len);
  r.pos += cfg_len;

  ModelConfig cfg;
  uint64_t seed = 0;
  for (const auto& [k, v] : detail::parse_kv_lines(cfg_text)) detail::apply_model_kv(cfg, seed, k, v);
  SegModel<float> m = build_model<float>(cfg, seed);

  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [n, t] : m.params) by_name[n] = &t;
  std::map<std::string, bool> filled;

  while (r.pos < buf.size()) {
    const size_t rec_off = r.pos;
    const uint32_t name_len = r.u32("parameter name length");
    r.need(name_len, "parameter name");
    const std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), name_len);
    r.pos += name_len;
    const std::string what_data = "parameter '" + name + "'";
    const uint8_t dtype = r.u8(what_data.c_str());
    if (dtype != 0)
      throw ParseError(ParseError::Kind::UnsupportedDtype, r.pos - 1,
                       "parameter '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const uint8_t rank = r.u8(what_data.c_str());
    Shape shape(rank);
    int64_t n = 1;
    for (auto& e : shape) {
      e = r.u32(what_data.c_str());
      n *= e;
    }
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ParseError(ParseError::Kind::BadValue, rec_off, "unknown parameter '" + name + "' in checkpoint");
    if (it->second->shape() != shape)
      throw ParseError(ParseError::Kind::BadValue, rec_off,
                       "parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                           shape_str(it->second->shape()));
    r.need(static_cast<size_t>(n) * 4, what_data.c_str());
    std::memcpy(it->second->mutable_values().data(), buf.data() + r.pos, static_cast<size_t>(n) * 4);
    r.pos += static_cast<size_t>(n) * 4;
    filled[name] = true;
  }
  for (const auto& [n, t] : m.params)
    if (!filled.count(n))
      throw ParseError(ParseError::Kind::Truncated, buf.size(), "checkpoint is missing parameter '" + n + "'");
  return m;
}

}  // namespace vseg

#endif  // VSEG_CHECKPOINT_HPP
