#ifndef VSEG_COMMON_HPP
#define VSEG_COMMON_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vseg {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

// Row-major strides: stride of the last axis is 1.
inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};

/// Structured file-format error. `offset` is the byte position the parser
/// was examining when it gave up; `kind` classifies the failure.
struct ParseError : Error {
  enum class Kind {
    BadMagic,
    BadVersion,
    UnsupportedDtype,
    BadDimensionality,
    Truncated,
    LengthMismatch,
    BadValue,
  };
  Kind kind;
  size_t offset;
  ParseError(Kind k, size_t off, const std::string& msg)
      : Error(msg + " (at byte offset " + std::to_string(off) + ")"), kind(k), offset(off) {}
};

// ---------------------------------------------------------------------------
// Counter-based PRNG (SplitMix64 mixer). A draw is a pure function of
// (seed, counter), so results do not depend on evaluation order or platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t seed, uint64_t counter) {
  uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (counter + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double u64_to_unit(uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;  // [0,1)
}

/// Standard normal draw keyed by (seed, index): Box-Muller on two fixed
/// counters, no cached state.
inline double gaussian_at(uint64_t seed, uint64_t index) {
  double u1 = u64_to_unit(splitmix64(seed, 2 * index));
  double u2 = u64_to_unit(splitmix64(seed, 2 * index + 1));
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

class CounterRng {
 public:
  explicit CounterRng(uint64_t seed, uint64_t stream = 0)
      : seed_(seed ^ splitmix64(stream, 0x5eedULL)) {}

  uint64_t next_u64() { return splitmix64(seed_, ctr_++); }

  double uniform() { return u64_to_unit(next_u64()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n > 0. Multiply-shift, no modulo bias worth
  /// caring about at 64 bits.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>((static_cast<__uint128_t>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
  }

  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  uint64_t counter() const { return ctr_; }

 private:
  uint64_t seed_;
  uint64_t ctr_ = 0;
};

// ---------------------------------------------------------------------------
// Live-buffer accounting for the benchmark report.
// ---------------------------------------------------------------------------

struct AllocStats {
  static std::atomic<int64_t>& live() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void add(int64_t bytes) {
    int64_t now = live().fetch_add(bytes) + bytes;
    int64_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }
  static void sub(int64_t bytes) { live().fetch_sub(bytes); }
  static void reset_peak() { peak().store(live().load()); }
  static int64_t peak_bytes() { return peak().load(); }
};

}  // namespace vseg

#endif  // VSEG_COMMON_HPP
