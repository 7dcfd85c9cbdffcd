#include <akvq/quantizer.hpp>
#include <akvq/tensor.hpp>

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

namespace akvq {
namespace {

std::vector<std::uint8_t> codes_of(const QuantizedGroup& g) { return unpack_codes(g.packed, g.count, g.bits); }

QuantParams params(int bits, float clip, std::size_t group = kDefaultGroupSize) {
  QuantParams p;
  p.bits = bits;
  p.clip_ratio = clip;
  p.group_size = group;
  return p;
}

// Oracle: exhaustive search over all codes for argmin |x - scale (q - zero)|.
// Exact ties go to the candidate whose unclamped level (q - zero) is even.
std::uint8_t brute_force_code(float x, float scale, std::int32_t zero, int bits) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int q = 0; q < (1 << bits); ++q) {
    const double d = std::fabs(static_cast<double>(x) - static_cast<double>(scale) * (q - zero));
    const bool even = ((q - zero) % 2) == 0;
    if (d < best_d || (d == best_d && even)) {
      best = q;
      best_d = d;
    }
  }
  return static_cast<std::uint8_t>(best);
}

TEST(ClippedRangeTest, Examples) {
  const std::vector<float> g{-10.0f, 4.0f};
  EXPECT_EQ(clipped_range(g, 1.0f), std::make_pair(-10.0f, 4.0f));
  const auto [lo, hi] = clipped_range(g, 0.8f);
  EXPECT_FLOAT_EQ(lo, -8.0f);
  EXPECT_FLOAT_EQ(hi, 3.2f);
  const auto [clo, chi] = clipped_range(std::vector<float>{5, 5, 5}, 0.8f);
  EXPECT_FLOAT_EQ(clo, 4.0f);
  EXPECT_FLOAT_EQ(chi, 4.0f);
}

TEST(QuantizeGroupTest, HandEvaluatedTwoBit) {
  const auto g = quantize_group(std::vector<float>{0, 1, 2, 3}, params(2, 1.0f, 4));
  EXPECT_EQ(g.scale, 1.0f);
  EXPECT_EQ(g.zero, 0);
  EXPECT_EQ(codes_of(g), (std::vector<std::uint8_t>{0, 1, 2, 3}));
  EXPECT_EQ(dequantize_group(g), (std::vector<float>{0, 1, 2, 3}));
}

TEST(QuantizeGroupTest, ConstantGroupIsDegenerateAndExact) {
  for (int bits : {2, 4}) {
    const auto g = quantize_group(std::vector<float>{5, 5, 5, 5}, params(bits, 1.0f, 4));
    EXPECT_EQ(g.scale, 5.0f);
    EXPECT_EQ(g.zero, 0);
    EXPECT_EQ(codes_of(g), (std::vector<std::uint8_t>{1, 1, 1, 1}));
    EXPECT_EQ(dequantize_group(g), (std::vector<float>{5, 5, 5, 5}));
  }
  const auto zero = quantize_group(std::vector<float>(7, 0.0f), params(2, 0.8f, 7));
  for (float v : dequantize_group(zero)) EXPECT_EQ(v, 0.0f);
  const auto clipped = quantize_group(std::vector<float>{-3.5f, -3.5f}, params(2, 0.8f, 2));
  EXPECT_EQ(dequantize_group(clipped), (std::vector<float>{-3.5f, -3.5f}));
}

TEST(QuantizeGroupTest, DegenerateDequantExamples) {
  QuantizedGroup g;
  g.bits = 2;
  g.count = 2;
  g.scale = 5.0f;
  g.zero = 0;
  g.packed = pack_codes(std::vector<std::uint8_t>{1, 1}, 2);
  EXPECT_EQ(dequantize_group(g), (std::vector<float>{5, 5}));
}

TEST(QuantizeGroupTest, ClippedFourBitSaturates) {
  const std::vector<float> x{-10, -1, 0, 1, 10};
  const auto g = quantize_group(x, params(4, 0.8f, 5));
  const auto codes = codes_of(g);
  const auto rec = dequantize_group(g);
  EXPECT_EQ(codes[0], 0);
  EXPECT_EQ(codes[4], 15);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(codes[i], brute_force_code(x[i], g.scale, g.zero, 4));
    if (std::fabs(x[i]) <= 8.0f) EXPECT_LE(std::fabs(rec[i] - x[i]), g.scale / 2 + 1e-6f);
  }
}

TEST(QuantizeGroupTest, PartialGroupIsPaddedButStatsIgnorePadding) {
  const std::vector<float> x{10, 11, 12};
  const auto g = quantize_group(x, params(2, 1.0f, 8));
  EXPECT_EQ(g.count, 8u);
  EXPECT_EQ(g.packed.size(), 2u);
  // Statistics over {10, 11, 12} only: scale 2/3.
  EXPECT_FLOAT_EQ(g.scale, 2.0f / 3.0f);
  QuantizedRow row{{g}, 3};
  const auto rec = dequantize_row(row);
  ASSERT_EQ(rec.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(std::fabs(rec[i] - x[i]), g.scale / 2 + 1e-5f);
}

TEST(QuantizeGroupTest, RejectsBadInput) {
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{}, params(2, 1.0f)), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{1, 2}, params(3, 1.0f)), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{1, 2}, params(2, 0.0f)), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{1, 2}, params(2, 1.5f)), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{1, 2, 3}, params(2, 1.0f, 2)), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(quantize_group(std::vector<float>{1, NAN}, params(2, 1.0f)), ErrorKind::kNumeric);
}

TEST(QuantizeGroupTest, LargeOffsetStaysWithinHalfStep) {
  // Two adjacent floats near 1e10: the zero-point is about -2.9e7.
  const std::vector<float> x{1e10f, 1e10f + 1024.0f};
  const auto g = quantize_group(x, params(2, 1.0f, 2));
  EXPECT_LT(g.zero, -1000000);
  const auto rec = dequantize_group(g);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(rec[i], x[i], 1024.0);
}

TEST(PackTest, Examples) {
  EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{3, 0, 1, 2}, 2), (std::vector<std::uint8_t>{0x93}));
  EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{0xA, 0x5}, 4), (std::vector<std::uint8_t>{0x5A}));
  EXPECT_EQ(unpack_codes(std::vector<std::uint8_t>{0x93}, 4, 2), (std::vector<std::uint8_t>{3, 0, 1, 2}));
  EXPECT_EQ(unpack_codes(std::vector<std::uint8_t>{0x5A}, 2, 4), (std::vector<std::uint8_t>{0xA, 0x5}));
  EXPECT_EQ(unpack_codes(std::vector<std::uint8_t>{0x00}, 1, 2), (std::vector<std::uint8_t>{0}));
}

TEST(PackTest, Errors) {
  EXPECT_AKVQ_ERROR(pack_codes(std::vector<std::uint8_t>{4}, 2), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(pack_codes(std::vector<std::uint8_t>{16}, 4), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(pack_codes(std::vector<std::uint8_t>{1}, 8), ErrorKind::kParameter);
  EXPECT_AKVQ_ERROR(unpack_codes(std::vector<std::uint8_t>{0}, 5, 2), ErrorKind::kLength);
}

TEST(PackTest, PropertyRoundTrip) {
  Rng rng(2);
  for (int bits : {2, 4}) {
    std::uniform_int_distribution<int> code(0, (1 << bits) - 1);
    std::uniform_int_distribution<std::size_t> len(0, 300);
    for (int trial = 0; trial < 500; ++trial) {
      std::vector<std::uint8_t> c(len(rng));
      for (auto& v : c) v = static_cast<std::uint8_t>(code(rng));
      const auto packed = pack_codes(c, bits);
      EXPECT_EQ(packed.size(), packed_size(c.size(), bits));
      EXPECT_EQ(unpack_codes(packed, c.size(), bits), c);
    }
  }
}

TEST(QuantizerPropertyTest, CodesMatchBruteForceAndErrorIsBounded) {
  Rng rng(42);
  for (int bits : {2, 4}) {
    for (float clip : {0.8f, 1.0f}) {
      for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> x(128);
        const double spread = std::exp(std::uniform_real_distribution<double>(-5, 5)(rng));
        fill_random(x, rng, Gaussian{std::normal_distribution<double>(0, 3)(rng), spread});
        const auto g = quantize_group(x, params(bits, clip));
        const auto codes = codes_of(g);
        const auto rec = dequantize_group(g);
        const auto [cmin, cmax] = clipped_range(x, clip);
        for (std::size_t i = 0; i < x.size(); ++i) {
          ASSERT_EQ(codes[i], brute_force_code(x[i], g.scale, g.zero, bits));
          if (x[i] >= cmin && x[i] <= cmax)
            ASSERT_LE(std::fabs(static_cast<double>(rec[i]) - x[i]), g.scale / 2.0 + 1e-6);
        }
      }
    }
  }
}

TEST(QuantizerPropertyTest, MonotoneInValue) {
  Rng rng(9);
  std::uniform_real_distribution<float> u(-20.0f, 20.0f);
  for (int bits : {2, 4}) {
    for (int trial = 0; trial < 2000; ++trial) {
      const float scale = std::uniform_real_distribution<float>(0.01f, 5.0f)(rng);
      const auto zero = std::uniform_int_distribution<std::int32_t>(-5, 20)(rng);
      float a = u(rng), b = u(rng);
      if (a > b) std::swap(a, b);
      const auto max_code = static_cast<std::uint32_t>((1 << bits) - 1);
      ASSERT_LE(quantize_value(a, scale, zero, max_code), quantize_value(b, scale, zero, max_code));
    }
  }
}

TEST(QuantizerPropertyTest, RoundHalfEven) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-0.5), -0.0);
  EXPECT_EQ(round_half_even(-1.5), -2.0);
  EXPECT_EQ(quantize_value(0.5f, 1.0f, 0, 3), 0);
  EXPECT_EQ(quantize_value(1.5f, 1.0f, 0, 3), 2);
}

TEST(QuantizerPropertyTest, ConstantGroupsReconstructExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const float c = static_cast<float>(std::normal_distribution<double>(0, 100)(rng));
    const std::vector<float> x(128, c);
    for (int bits : {2, 4})
      for (float v : dequantize_group(quantize_group(x, params(bits, 0.8f)))) ASSERT_EQ(v, c);
  }
}

TEST(QuantizeRowTest, SplitsIntoGroupsAndAccountsBytes) {
  const Tensor t = gen_random({200}, 3, Gaussian{0, 1});
  const auto row = quantize_row(t.data(), params(2, 1.0f, 128));
  EXPECT_EQ(row.groups.size(), 2u);
  EXPECT_EQ(row.original_len, 200u);
  EXPECT_EQ(code_bytes(row), 64u);  // two padded groups of 128 codes at 2 bits
  EXPECT_EQ(overhead_bytes(row), 16u);
  const auto rec = dequantize_row(row);
  ASSERT_EQ(rec.size(), 200u);
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& g = row.groups[i / 128];
    EXPECT_LE(std::fabs(rec[i] - t.data()[i]), g.scale / 2 + 1e-6f);
  }
  std::vector<float> small(10);
  EXPECT_AKVQ_ERROR(dequantize_row_into(row, small), ErrorKind::kLength);
}

TEST(QuantizeRowTest, FourBitsBeatTwoBits) {
  const Tensor t = gen_random({64, 128}, 8, Gaussian{0, 1});
  double e2 = 0.0, e4 = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto a = dequantize_row(quantize_row(t.row(r), params(2, 1.0f)));
    const auto b = dequantize_row(quantize_row(t.row(r), params(4, 1.0f)));
    for (std::size_t c = 0; c < 128; ++c) {
      e2 += std::pow(a[c] - t.at(r, c), 2);
      e4 += std::pow(b[c] - t.at(r, c), 2);
    }
  }
  EXPECT_LT(e4, e2);
}

}  // namespace
}  // namespace akvq
