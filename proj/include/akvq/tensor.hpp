#pragma once

#include <akvq/error.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace akvq {

enum class DType : std::uint8_t { kF32 = 0, kF16AsF32 = 1 };

/// Dense row-major float tensor. Shape and payload are validated together at
/// construction; the payload is held by value.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, DType dtype = DType::kF32)
      : shape_(std::move(shape)), data_(checked_count(shape_), 0.0f), dtype_(dtype) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data, DType dtype = DType::kF32)
      : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
    require(checked_count(shape_) == data_.size(), ErrorKind::kShape,
            "payload length does not match shape");
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  DType dtype() const noexcept { return dtype_; }
  void set_dtype(DType d) noexcept { dtype_ = d; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  // 2-D helpers; rows() treats every leading dim as a row dimension.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }
  std::span<float> row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Flat offset of a full multi-index.
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    require(idx.size() == shape_.size(), ErrorKind::kShape, "index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
      require(i < shape_[d], ErrorKind::kParameter, "index out of range");
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
  }

 private:
  static std::size_t checked_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
        fail(ErrorKind::kSize, "shape product overflows");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
  DType dtype_ = DType::kF32;
};

// ---------------------------------------------------------------------------
// IEEE binary16 round trip

/// float -> binary16 bits, round-to-nearest-even, overflow to infinity.
inline std::uint16_t float_to_half_bits(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t exp = (x >> 23) & 0xFFu;
  std::uint32_t mant = x & 0x7FFFFFu;

  if (exp == 0xFF) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));

  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 0x1F) return static_cast<std::uint16_t>(sign | 0x7C00u);

  if (e <= 0) {
    // Subnormal half (or zero). Shift the full significand into place.
    if (e < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }

  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may roll into inf
  return static_cast<std::uint16_t>(sign | h);
}

inline float half_bits_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | (mant & 0x3FFu) << 13;
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | (exp + 127 - 15) << 23 | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline float round_to_f16(float f) { return half_bits_to_float(float_to_half_bits(f)); }

inline Tensor round_to_f16(const Tensor& t) {
  Tensor out = t;
  for (float& v : out.data()) v = round_to_f16(v);
  out.set_dtype(DType::kF16AsF32);
  return out;
}

// ---------------------------------------------------------------------------
// Seeded generation

struct Gaussian {
  double mean = 0.0;
  double stddev = 1.0;
};

struct Uniform {
  double lo = 0.0;
  double hi = 1.0;
};

using Distribution = std::variant<Gaussian, Uniform>;

/// Engine used for all synthetic data: 64-bit Mersenne Twister seeded
/// directly with the caller's seed.
using Rng = std::mt19937_64;

/// Fills `out` from `dist`; same (rng state, dist) gives the same values.
inline void fill_random(std::span<float> out, Rng& rng, const Distribution& dist) {
  if (const auto* g = std::get_if<Gaussian>(&dist)) {
    require(g->stddev >= 0.0 && std::isfinite(g->stddev), ErrorKind::kParameter,
            "gaussian stddev must be >= 0");
    if (g->stddev == 0.0) {
      for (float& v : out) v = static_cast<float>(g->mean);
      return;
    }
    std::normal_distribution<double> nd(g->mean, g->stddev);
    for (float& v : out) v = static_cast<float>(nd(rng));
  } else {
    const auto& u = std::get<Uniform>(dist);
    require(u.lo <= u.hi, ErrorKind::kParameter, "uniform requires lo <= hi");
    std::uniform_real_distribution<double> ud(u.lo, u.hi);
    for (float& v : out) v = static_cast<float>(ud(rng));
  }
}

inline Tensor gen_random(std::vector<std::size_t> shape, std::uint64_t seed, const Distribution& dist) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  fill_random(t.data(), rng, dist);
  return t;
}

// ---------------------------------------------------------------------------
// AKV1 file format
//
//   magic "AKV1" | dtype u8 (0 = f32 LE) | ndim u8 | ndim x u64 LE dims | payload

inline constexpr char kTensorMagic[4] = {'A', 'K', 'V', '1'};
inline constexpr std::size_t kMaxTensorRank = 8;

namespace detail {

inline void put_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
  require(t.ndim() >= 1 && t.ndim() <= kMaxTensorRank, ErrorKind::kShape, "rank must be in [1, 8]");
  for (std::size_t d : t.shape()) require(d >= 1, ErrorKind::kShape, "dims must be >= 1");
  std::vector<unsigned char> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  out.push_back(0);
  out.push_back(static_cast<unsigned char>(t.ndim()));
  for (std::size_t d : t.shape()) detail::put_u64_le(out, d);
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.data()) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  return out;
}

inline Tensor decode_tensor(std::span<const unsigned char> bytes) {
  require(bytes.size() >= 6, ErrorKind::kLength, "truncated header");
  require(std::memcmp(bytes.data(), kTensorMagic, 4) == 0, ErrorKind::kFormat, "bad magic");
  require(bytes[4] == 0, ErrorKind::kFormat, "unsupported dtype code " + std::to_string(bytes[4]));
  const std::size_t ndim = bytes[5];
  require(ndim >= 1 && ndim <= kMaxTensorRank, ErrorKind::kFormat, "ndim must be in [1, 8]");
  require(bytes.size() >= 6 + 8 * ndim, ErrorKind::kLength, "truncated dims");

  std::vector<std::size_t> shape(ndim);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = detail::get_u64_le(bytes.data() + 6 + 8 * i);
    require(d >= 1, ErrorKind::kFormat, "dims must be >= 1");
    if (count > std::numeric_limits<std::uint64_t>::max() / d) fail(ErrorKind::kSize, "dims product overflows");
    count *= d;
    shape[i] = static_cast<std::size_t>(d);
  }
  const std::size_t header = 6 + 8 * ndim;
  if (count > (std::numeric_limits<std::uint64_t>::max() - header) / 4)
    fail(ErrorKind::kSize, "payload size overflows");
  const std::uint64_t need = header + 4 * count;
  require(bytes.size() >= need, ErrorKind::kLength, "truncated payload");
  require(bytes.size() == need, ErrorKind::kLength, "trailing bytes after payload");

  std::vector<float> data(static_cast<std::size_t>(count));
  const unsigned char* p = bytes.data() + header;
  for (std::size_t i = 0; i < data.size(); ++i, p += 4) {
    const std::uint32_t bits = std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
                               std::uint32_t{p[3]} << 24;
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace akvq
