#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "vseg/phantom.hpp"
#include "vseg/volume_io.hpp"

using namespace vseg;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("vseg_io_" + name)).string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Minimal conformant NIfTI-1 file: 4x4x4 float32, spacing (2,1,1).
std::string build_nifti(int16_t dim0 = 3, int16_t datatype = 16, size_t payload_bytes = 256,
                        float vox_offset = 352.0f, const char* magic = "n+1") {
  std::string h(352, '\0');
  auto put_i32 = [&](size_t off, int32_t v) { std::memcpy(&h[off], &v, 4); };
  auto put_i16 = [&](size_t off, int16_t v) { std::memcpy(&h[off], &v, 2); };
  auto put_f32 = [&](size_t off, float v) { std::memcpy(&h[off], &v, 4); };
  put_i32(0, 348);
  put_i16(40, dim0);
  put_i16(42, 4);
  put_i16(44, 4);
  put_i16(46, 4);
  for (size_t i = 4; i < 8; ++i) put_i16(40 + 2 * i, 1);
  put_i16(70, datatype);
  put_i16(72, static_cast<int16_t>(datatype == 2 ? 8 : (datatype == 4 ? 16 : 32)));
  put_f32(76, 0.0f);
  put_f32(80, 1.0f);  // pixdim[1] -> sx
  put_f32(84, 1.0f);  // pixdim[2] -> sy
  put_f32(88, 2.0f);  // pixdim[3] -> sz
  put_f32(108, vox_offset);
  std::memcpy(&h[344], magic, std::strlen(magic) + 1);
  std::string payload(payload_bytes, '\0');
  for (size_t i = 0; i + 3 < payload.size(); i += 4) {
    float v = static_cast<float>(i / 4);
    std::memcpy(&payload[i], &v, 4);
  }
  return h + payload;
}

}  // namespace

TEST_CASE("VSEG image round-trip is bit-exact") {
  PhantomSpec spec;
  spec.depth = 12;
  spec.height = 24;
  spec.width = 24;
  spec.r_min = 2;
  spec.r_max = 5;
  auto s = gen_phantom(spec, 3, "roundtrip");
  const std::string img_path = tmp_path("img.vseg");
  const std::string msk_path = tmp_path("msk.vseg");
  write_vseg_image(s.image, s.spacing, img_path);
  write_vseg_mask(s.mask, s.spacing, msk_path);

  auto img = read_vseg(img_path);
  REQUIRE(img.dtype == VsegDtype::f32);
  CHECK(img.d == 12);
  CHECK(img.h == 24);
  CHECK(img.w == 24);
  CHECK(std::memcmp(img.f32.data(), s.image.data(), img.f32.size() * 4) == 0);
  CHECK(img.spacing.z == 1.0);

  auto msk = read_vseg(msk_path);
  REQUIRE(msk.dtype == VsegDtype::u8);
  CHECK(msk.u8 == s.mask.data);

  // Re-writing the parsed volume reproduces the file byte for byte.
  const std::string img2_path = tmp_path("img2.vseg");
  write_vseg_image(TensorF::from({img.d, img.h, img.w}, img.f32), img.spacing, img2_path);
  CHECK(slurp(img_path) == slurp(img2_path));
}

TEST_CASE("VSEG parse errors carry kind and offset") {
  SECTION("bad magic at offset 0") {
    const std::string p = tmp_path("badmagic.vseg");
    std::string bytes = detail::vseg_header(VsegDtype::u8, 1, 1, 1, Spacing{});
    bytes[0] = 'X';
    bytes.push_back('\0');
    dump(p, bytes);
    try {
      read_vseg(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::BadMagic);
      CHECK(e.offset == 0);
    }
  }
  SECTION("bad version") {
    std::string bytes = detail::vseg_header(VsegDtype::u8, 1, 1, 1, Spacing{});
    bytes[4] = 2;
    bytes.push_back('\0');
    const std::string p = tmp_path("badver.vseg");
    dump(p, bytes);
    try {
      read_vseg(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::BadVersion);
      CHECK(e.offset == 4);
    }
  }
  SECTION("payload length mismatch at header+payload offset") {
    // Header says 2x2x2 float32 (32 bytes) but payload has 31.
    std::string bytes = detail::vseg_header(VsegDtype::f32, 2, 2, 2, Spacing{});
    bytes.append(31, '\0');
    const std::string p = tmp_path("short.vseg");
    dump(p, bytes);
    try {
      read_vseg(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::LengthMismatch);
      CHECK(e.offset == kVsegHeaderBytes + 31);
    }
  }
  SECTION("unknown dtype code") {
    std::string bytes = detail::vseg_header(VsegDtype::u8, 1, 1, 1, Spacing{});
    bytes[8] = 7;
    bytes.push_back('\0');
    const std::string p = tmp_path("baddtype.vseg");
    dump(p, bytes);
    try {
      read_vseg(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::UnsupportedDtype);
      CHECK(e.offset == 8);
    }
  }
}

TEST_CASE("export_prediction writes masks and validates binarity") {
  BinaryMask m{{1, 2, 2}, {1, 0, 1, 0}};
  const std::string p = tmp_path("pred.vseg");
  export_prediction(m, Spacing{1, 1, 1}, p);
  auto back = read_vseg(p);
  CHECK(back.u8 == m.data);

  BinaryMask bad{{1, 2, 2}, {1, 0, 2, 0}};
  CHECK_THROWS_AS(export_prediction(bad, Spacing{}, p), DomainError);

  BinaryMask empty{{1, 2, 2}, {0, 0, 0, 0}};
  export_prediction(empty, Spacing{}, p);
  CHECK(read_vseg(p).u8 == empty.data);
}

TEST_CASE("NIfTI subset reader accepts the conformant fixture") {
  const std::string p = tmp_path("ok.nii");
  dump(p, build_nifti());
  auto v = read_nifti(p);
  CHECK(v.volume.shape() == Shape{4, 4, 4});
  CHECK(v.spacing.z == 2.0);
  CHECK(v.spacing.y == 1.0);
  CHECK(v.spacing.x == 1.0);
  // min-max normalized into [0,1]
  float mn = 1e9f, mx = -1e9f;
  for (float x : v.volume.values()) {
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  }
  CHECK(mn == 0.0f);
  CHECK(mx == 1.0f);
}

TEST_CASE("NIfTI reader rejects each documented malformation") {
  SECTION("wrong sizeof_hdr is not NIfTI-1") {
    std::string bytes = build_nifti();
    bytes[0] = 0;
    const std::string p = tmp_path("notnifti.nii");
    dump(p, bytes);
    try {
      read_nifti(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::BadMagic);
      CHECK(e.offset == 0);
    }
  }
  SECTION("unsupported datatype code 64") {
    const std::string p = tmp_path("f64.nii");
    dump(p, build_nifti(3, 64));
    try {
      read_nifti(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::UnsupportedDtype);
      CHECK(e.offset == 70);
    }
  }
  SECTION("non-3D volume is a dimensionality error") {
    const std::string p = tmp_path("4d.nii");
    dump(p, build_nifti(4));
    try {
      read_nifti(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::BadDimensionality);
    }
  }
  SECTION("truncated payload") {
    const std::string p = tmp_path("trunc.nii");
    dump(p, build_nifti(3, 16, 100));
    try {
      read_nifti(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::Truncated);
    }
  }
  SECTION("two-file NIfTI rejected") {
    const std::string p = tmp_path("ni1.nii");
    dump(p, build_nifti(3, 16, 256, 352.0f, "ni1"));
    try {
      read_nifti(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.kind == ParseError::Kind::BadValue);
      CHECK(e.offset == 344);
    }
  }
}

TEST_CASE("NIfTI constant volume normalizes to zeros") {
  std::string bytes = build_nifti(3, 2, 64);  // uint8 payload, all zeros
  const std::string p = tmp_path("const.nii");
  dump(p, bytes);
  auto v = read_nifti(p);
  for (float x : v.volume.values()) CHECK(x == 0.0f);
}

TEST_CASE("NIfTI int16 conversion and voxel count preservation") {
  std::string bytes = build_nifti(3, 4, 128);  // int16 payload
  // Write a ramp with negative values.
  for (size_t i = 0; i < 128; i += 2) {
    int16_t v = static_cast<int16_t>(static_cast<int>(i) - 64);
    std::memcpy(&bytes[352 + i], &v, 2);
  }
  const std::string p = tmp_path("i16.nii");
  dump(p, bytes);
  auto v = read_nifti(p);
  CHECK(v.volume.size() == 64);
  for (float x : v.volume.values()) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
}
