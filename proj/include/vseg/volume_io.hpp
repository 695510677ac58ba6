#ifndef VSEG_VOLUME_IO_HPP
#define VSEG_VOLUME_IO_HPP

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vseg/loss_metrics.hpp"
#include "vseg/tensor.hpp"

// Bit-exact volume persistence. VSEG is the native format:
//   magic "VSEG" | version u32=1 | dtype u8 (0 float32 image, 1 uint8 mask)
//   | reserved u8*3 = 0 | D,H,W u32 | spacing sz,sy,sx float32
// followed by the raw row-major payload (W fastest). All integers are
// little-endian. A minimal NIfTI-1 reader ingests external volumes.

namespace vseg {

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& s, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(s, u);
}

struct ByteReader {
  const std::vector<unsigned char>& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw ParseError(ParseError::Kind::Truncated, buf.size(),
                       std::string("unexpected end of file while reading ") + what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  int32_t i32(const char* what) { return static_cast<int32_t>(u32(what)); }
  int16_t i16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return static_cast<int16_t>(v);
  }
  float f32(const char* what) {
    uint32_t u = u32(what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open file for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

}  // namespace detail

enum class VsegDtype : uint8_t { f32 = 0, u8 = 1 };

struct VsegVolume {
  VsegDtype dtype;
  int64_t d = 0, h = 0, w = 0;
  Spacing spacing;
  std::vector<float> f32;   // when dtype == f32
  std::vector<uint8_t> u8;  // when dtype == u8
};

inline constexpr size_t kVsegHeaderBytes = 36;

namespace detail {

inline std::string vseg_header(VsegDtype dt, int64_t d, int64_t h, int64_t w, const Spacing& sp) {
  std::string s = "VSEG";
  put_u32(s, 1);
  s.push_back(static_cast<char>(dt));
  s.append(3, '\0');
  put_u32(s, static_cast<uint32_t>(d));
  put_u32(s, static_cast<uint32_t>(h));
  put_u32(s, static_cast<uint32_t>(w));
  put_f32(s, static_cast<float>(sp.z));
  put_f32(s, static_cast<float>(sp.y));
  put_f32(s, static_cast<float>(sp.x));
  return s;
}

}  // namespace detail

inline void write_vseg_image(const TensorF& img, const Spacing& sp, const std::string& path) {
  if (img.rank() != 3) throw ShapeError("write_vseg_image: expected [D,H,W], got " + shape_str(img.shape()));
  std::string s = detail::vseg_header(VsegDtype::f32, img.dim(0), img.dim(1), img.dim(2), sp);
  static_assert(std::endian::native == std::endian::little, "payload writer assumes little-endian host");
  s.append(reinterpret_cast<const char*>(img.data()), static_cast<size_t>(img.size()) * 4);
  detail::write_file(path, s);
}

inline void write_vseg_mask(const BinaryMask& mask, const Spacing& sp, const std::string& path) {
  std::string s = detail::vseg_header(VsegDtype::u8, mask.dims[0], mask.dims[1], mask.dims[2], sp);
  s.append(reinterpret_cast<const char*>(mask.data.data()), mask.data.size());
  detail::write_file(path, s);
}

inline VsegVolume read_vseg(const std::string& path) {
  const auto buf = detail::read_file(path);
  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), "VSEG", 4) != 0)
    throw ParseError(ParseError::Kind::BadMagic, 0, "bad magic, not a VSEG file");
  r.pos = 4;
  const uint32_t version = r.u32("version");
  if (version != 1)
    throw ParseError(ParseError::Kind::BadVersion, 4, "unsupported VSEG version " + std::to_string(version));
  const uint8_t dt = r.u8("dtype");
  if (dt > 1) throw ParseError(ParseError::Kind::UnsupportedDtype, 8, "unknown dtype code " + std::to_string(dt));
  for (int i = 0; i < 3; ++i) {
    if (r.u8("reserved") != 0)
      throw ParseError(ParseError::Kind::BadValue, 9 + static_cast<size_t>(i), "reserved byte must be zero");
  }
  VsegVolume v;
  v.dtype = static_cast<VsegDtype>(dt);
  v.d = r.u32("extent D");
  v.h = r.u32("extent H");
  v.w = r.u32("extent W");
  if (v.d < 1 || v.h < 1 || v.w < 1)
    throw ParseError(ParseError::Kind::BadValue, 12, "extents must be >= 1");
  v.spacing.z = r.f32("spacing sz");
  v.spacing.y = r.f32("spacing sy");
  v.spacing.x = r.f32("spacing sx");
  const size_t n = static_cast<size_t>(v.d * v.h * v.w);
  const size_t expect = n * (v.dtype == VsegDtype::f32 ? 4 : 1);
  const size_t have = buf.size() - kVsegHeaderBytes;
  if (have != expect)
    throw ParseError(ParseError::Kind::LengthMismatch, kVsegHeaderBytes + std::min(have, expect),
                     "payload has " + std::to_string(have) + " bytes, header implies " + std::to_string(expect));
  if (v.dtype == VsegDtype::f32) {
    v.f32.resize(n);
    std::memcpy(v.f32.data(), buf.data() + kVsegHeaderBytes, expect);
  } else {
    v.u8.assign(buf.begin() + static_cast<std::ptrdiff_t>(kVsegHeaderBytes), buf.end());
  }
  return v;
}

/// Writes a binary mask as a uint8 VSEG file. Rejects nonbinary input.
inline void export_prediction(const BinaryMask& mask, const Spacing& sp, const std::string& path) {
  for (uint8_t v : mask.data)
    if (v > 1) throw DomainError("export_prediction: mask must be binary (found value " + std::to_string(v) + ")");
  write_vseg_mask(mask, sp, path);
}

// ---------------------------------------------------------------------------
// NIfTI-1 subset reader: uncompressed single-file, 3-D, datatypes
// uint8 / int16 / float32, spacing only.
// ---------------------------------------------------------------------------

struct NiftiVolume {
  TensorF volume;  // [D,H,W], min-max normalized to [0,1]
  Spacing spacing;
};

inline NiftiVolume read_nifti(const std::string& path) {
  const auto buf = detail::read_file(path);
  detail::ByteReader r{buf};
  const int32_t sizeof_hdr = r.i32("sizeof_hdr");
  if (sizeof_hdr != 348) throw ParseError(ParseError::Kind::BadMagic, 0, "not NIfTI-1 (sizeof_hdr != 348)");
  if (buf.size() < 348) throw ParseError(ParseError::Kind::Truncated, buf.size(), "header shorter than 348 bytes");

  r.pos = 40;
  int16_t dim[8];
  for (auto& d : dim) d = r.i16("dim");
  if (dim[0] != 3)
    throw ParseError(ParseError::Kind::BadDimensionality, 40,
                     "expected 3-D volume, dim[0]=" + std::to_string(dim[0]));
  for (int i = 1; i <= 3; ++i)
    if (dim[i] < 1)
      throw ParseError(ParseError::Kind::BadValue, 40 + 2 * static_cast<size_t>(i),
                       "dim[" + std::to_string(i) + "] must be >= 1");

  r.pos = 70;
  const int16_t datatype = r.i16("datatype");
  if (datatype != 2 && datatype != 4 && datatype != 16)
    throw ParseError(ParseError::Kind::UnsupportedDtype, 70,
                     "unsupported NIfTI datatype code " + std::to_string(datatype));

  r.pos = 76;
  float pixdim[8];
  for (auto& p : pixdim) p = r.f32("pixdim");
  const float vox_offset = r.f32("vox_offset");  // at 108

  r.pos = 344;
  char magic[4];
  r.need(4, "magic");
  std::memcpy(magic, buf.data() + 344, 4);
  if (std::memcmp(magic, "n+1\0", 4) != 0) {
    if (std::memcmp(magic, "ni1\0", 4) == 0)
      throw ParseError(ParseError::Kind::BadValue, 344, "two-file (ni1) NIfTI is not supported");
    throw ParseError(ParseError::Kind::BadMagic, 344, "bad NIfTI magic");
  }
  if (vox_offset < 348.0f)
    throw ParseError(ParseError::Kind::BadValue, 108,
                     "vox_offset " + std::to_string(vox_offset) + " < 348 for single-file NIfTI");

  const int64_t W = dim[1], H = dim[2], D = dim[3];
  const size_t n = static_cast<size_t>(W * H * D);
  const size_t elem = datatype == 2 ? 1 : (datatype == 4 ? 2 : 4);
  const size_t off = static_cast<size_t>(vox_offset);
  if (off + n * elem > buf.size())
    throw ParseError(ParseError::Kind::Truncated, buf.size(),
                     "payload needs " + std::to_string(n * elem) + " bytes at offset " + std::to_string(off));

  // NIfTI stores x fastest, which matches row-major [D,H,W] with W fastest.
  std::vector<float> vol(n);
  const unsigned char* p = buf.data() + off;
  if (datatype == 2) {
    for (size_t i = 0; i < n; ++i) vol[i] = static_cast<float>(p[i]);
  } else if (datatype == 4) {
    for (size_t i = 0; i < n; ++i) {
      uint16_t u = static_cast<uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
      vol[i] = static_cast<float>(static_cast<int16_t>(u));
    }
  } else {
    std::memcpy(vol.data(), p, n * 4);
  }

  float mn = vol[0], mx = vol[0];
  for (float v : vol) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx > mn) {
    const float inv = 1.0f / (mx - mn);
    for (auto& v : vol) v = (v - mn) * inv;
  } else {
    std::fill(vol.begin(), vol.end(), 0.0f);
  }

  NiftiVolume out;
  out.volume = TensorF::from({D, H, W}, std::move(vol));
  out.spacing = {static_cast<double>(pixdim[3]), static_cast<double>(pixdim[2]), static_cast<double>(pixdim[1])};
  return out;
}

}  // namespace vseg

#endif  // VSEG_VOLUME_IO_HPP
