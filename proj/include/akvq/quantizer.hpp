#pragma once

#include <akvq/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace akvq {

inline constexpr std::size_t kDefaultGroupSize = 128;
inline constexpr double kDegenerateRange = 1e-12;

struct QuantParams {
  int bits = 2;
  float clip_ratio = 1.0f;
  std::size_t group_size = kDefaultGroupSize;

  void validate() const {
    require(bits == 2 || bits == 4, ErrorKind::kParameter, "bits must be 2 or 4");
    require(clip_ratio > 0.0f && clip_ratio <= 1.0f, ErrorKind::kParameter, "clip_ratio must be in (0, 1]");
    require(group_size >= 1, ErrorKind::kParameter, "group_size must be >= 1");
  }

  std::uint32_t max_code() const { return (1u << bits) - 1u; }
};

/// One quantized group: `count` codes of `bits` each, packed little-end first.
struct QuantizedGroup {
  int bits = 2;
  std::size_t count = 0;
  std::vector<std::uint8_t> packed;
  float scale = 0.0f;
  std::int32_t zero = 0;

  friend bool operator==(const QuantizedGroup&, const QuantizedGroup&) = default;
};

/// One token's channel vector split into groups; the last group may be padded.
struct QuantizedRow {
  std::vector<QuantizedGroup> groups;
  std::size_t original_len = 0;

  friend bool operator==(const QuantizedRow&, const QuantizedRow&) = default;
};

// ---------------------------------------------------------------------------
// Packing

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
  require(bits == 2 || bits == 4, ErrorKind::kParameter, "bits must be 2 or 4");
  const unsigned limit = 1u << bits;
  const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    require(codes[i] < limit, ErrorKind::kParameter, "code out of range for bit width");
    const unsigned shift = static_cast<unsigned>(bits) * static_cast<unsigned>(i % per_byte);
    out[i / per_byte] = static_cast<std::uint8_t>(out[i / per_byte] | (codes[i] << shift));
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
  require(bits == 2 || bits == 4, ErrorKind::kParameter, "bits must be 2 or 4");
  require(bytes.size() >= packed_size(count, bits), ErrorKind::kLength, "not enough bytes for code count");
  const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
  const unsigned mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned shift = static_cast<unsigned>(bits) * static_cast<unsigned>(i % per_byte);
    codes[i] = static_cast<std::uint8_t>((bytes[i / per_byte] >> shift) & mask);
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Group quantization

/// Range after scaling both extremes by `clip_ratio`.
inline std::pair<float, float> clipped_range(std::span<const float> group, float clip_ratio) {
  require(!group.empty(), ErrorKind::kParameter, "empty group");
  const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
  return {clip_ratio * *lo, clip_ratio * *hi};
}

/// Half-to-even rounding of a double; the default FP environment already
/// rounds to nearest-even so nearbyint is exact for our purpose.
inline double round_half_even(double x) { return std::nearbyint(x); }

/// Code for `x` under fixed (scale, zero): clamp(round(x / scale) + zero).
inline std::uint8_t quantize_value(float x, float scale, std::int32_t zero, std::uint32_t max_code) {
  const double q = round_half_even(static_cast<double>(x) / static_cast<double>(scale)) + zero;
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, static_cast<double>(max_code)));
}

/// Quantizes up to `p.group_size` values. Range statistics come from the
/// supplied values only; missing tail slots are padded with the code of 0.0.
///
/// A group whose clipped range is below 1e-12 is stored degenerately as
/// scale = the group's constant value, zero = 0 and every code = 1, which
/// dequantizes to that constant exactly.
inline QuantizedGroup quantize_group(std::span<const float> group, const QuantParams& p) {
  p.validate();
  require(!group.empty(), ErrorKind::kParameter, "empty group");
  require(group.size() <= p.group_size, ErrorKind::kParameter, "group longer than group_size");
  for (float v : group) require(std::isfinite(v), ErrorKind::kNumeric, "non-finite value in group");

  QuantizedGroup g;
  g.bits = p.bits;
  g.count = p.group_size;
  g.packed.assign(packed_size(p.group_size, p.bits), 0);
  const std::size_t per_byte = 8 / static_cast<std::size_t>(p.bits);
  auto put = [&](std::size_t i, std::uint8_t code) {
    const unsigned shift = static_cast<unsigned>(p.bits) * static_cast<unsigned>(i % per_byte);
    g.packed[i / per_byte] = static_cast<std::uint8_t>(g.packed[i / per_byte] | (code << shift));
  };

  const auto [cmin, cmax] = clipped_range(group, p.clip_ratio);
  const double range = static_cast<double>(cmax) - static_cast<double>(cmin);
  const float scale = static_cast<float>(range / p.max_code());
  // A range that is tiny relative to its offset would push the zero-point
  // outside int32; those groups take the constant path as well.
  const bool degenerate = range < kDegenerateRange || scale <= 0.0f ||
                          std::fabs(static_cast<double>(cmin) / scale) > 2147483000.0;
  if (degenerate) {
    const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
    g.scale = static_cast<float>((static_cast<double>(*lo) + static_cast<double>(*hi)) / 2.0);
    g.zero = 0;
    for (std::size_t i = 0; i < p.group_size; ++i) put(i, 1);
  } else {
    const std::uint32_t max_code = p.max_code();
    g.scale = scale;
    g.zero = static_cast<std::int32_t>(-round_half_even(static_cast<double>(cmin) / g.scale));
    for (std::size_t i = 0; i < p.group_size; ++i) {
      const float x = i < group.size() ? group[i] : 0.0f;
      put(i, quantize_value(x, g.scale, g.zero, max_code));
    }
  }
  return g;
}

inline float dequantize_value(std::uint8_t code, float scale, std::int32_t zero) {
  return static_cast<float>(static_cast<double>(scale) *
                            (static_cast<double>(code) - static_cast<double>(zero)));
}

inline std::vector<float> dequantize_group(const QuantizedGroup& g) {
  const auto codes = unpack_codes(g.packed, g.count, g.bits);
  std::vector<float> out(g.count);
  for (std::size_t i = 0; i < g.count; ++i) out[i] = dequantize_value(codes[i], g.scale, g.zero);
  return out;
}

// ---------------------------------------------------------------------------
// Rows

inline QuantizedRow quantize_row(std::span<const float> row, const QuantParams& p) {
  p.validate();
  require(!row.empty(), ErrorKind::kParameter, "empty row");
  QuantizedRow out;
  out.original_len = row.size();
  out.groups.reserve((row.size() + p.group_size - 1) / p.group_size);
  for (std::size_t start = 0; start < row.size(); start += p.group_size) {
    const std::size_t len = std::min(p.group_size, row.size() - start);
    out.groups.push_back(quantize_group(row.subspan(start, len), p));
  }
  return out;
}

/// Writes `r.original_len` reconstructed values into `out`.
inline void dequantize_row_into(const QuantizedRow& r, std::span<float> out) {
  require(out.size() >= r.original_len, ErrorKind::kLength, "output span too short");
  std::size_t pos = 0;
  for (const QuantizedGroup& g : r.groups) {
    require(g.packed.size() >= packed_size(g.count, g.bits), ErrorKind::kLength, "not enough bytes for code count");
    const std::size_t per_byte = 8 / static_cast<std::size_t>(g.bits);
    const unsigned mask = (1u << g.bits) - 1u;
    for (std::size_t i = 0; i < g.count && pos < r.original_len; ++i, ++pos) {
      const unsigned shift = static_cast<unsigned>(g.bits) * static_cast<unsigned>(i % per_byte);
      const auto code = static_cast<std::uint8_t>((g.packed[i / per_byte] >> shift) & mask);
      out[pos] = dequantize_value(code, g.scale, g.zero);
    }
  }
}

inline std::vector<float> dequantize_row(const QuantizedRow& r) {
  std::vector<float> out(r.original_len);
  dequantize_row_into(r, out);
  return out;
}

/// Bytes held by a row: packed codes plus 8 bytes (f32 scale + i32 zero) per group.
inline std::size_t code_bytes(const QuantizedRow& r) {
  std::size_t n = 0;
  for (const auto& g : r.groups) n += g.packed.size();
  return n;
}

inline std::size_t overhead_bytes(const QuantizedRow& r) { return 8 * r.groups.size(); }

}  // namespace akvq
