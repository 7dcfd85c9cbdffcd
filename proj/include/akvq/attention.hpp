#pragma once

#include <akvq/error.hpp>
#include <akvq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace akvq {

inline constexpr double kDefaultRopeBase = 10000.0;

/// Rotates channel pairs (2i, 2i+1) by pos * base^(-2i / head_dim).
inline void rope_row_inplace(std::span<float> row, std::size_t pos, double base = kDefaultRopeBase) {
  require(row.size() % 2 == 0, ErrorKind::kParameter, "RoPE needs an even head_dim");
  const double d = static_cast<double>(row.size());
  for (std::size_t i = 0; i < row.size() / 2; ++i) {
    const double theta = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(i) / d);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double x = row[2 * i];
    const double y = row[2 * i + 1];
    row[2 * i] = static_cast<float>(x * c - y * s);
    row[2 * i + 1] = static_cast<float>(x * s + y * c);
  }
}

inline Tensor rope_apply(const Tensor& rows, const std::vector<std::size_t>& positions, double base = kDefaultRopeBase) {
  require(rows.ndim() == 2, ErrorKind::kShape, "expected tokens x head_dim");
  require(rows.cols() % 2 == 0, ErrorKind::kParameter, "RoPE needs an even head_dim");
  require(positions.size() == rows.rows(), ErrorKind::kShape, "one position per row required");
  Tensor out = rows;
  for (std::size_t r = 0; r < out.rows(); ++r) rope_row_inplace(out.row(r), positions[r], base);
  return out;
}

namespace detail {

// Eight independent partial sums let the compiler vectorize without
// reassociation flags.
inline float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

}  // namespace detail

/// Single-query attention over the first `n_keys` rows of row-major key and
/// value buffers: softmax(q k^T / sqrt(d)) V, max-subtracted.
inline void attend(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
                   std::size_t n_keys, std::span<float> out, std::vector<double>& scratch) {
  const std::size_t d = q.size();
  require(n_keys >= 1 && keys.size() >= n_keys * d && values.size() >= n_keys * d && out.size() == d,
          ErrorKind::kShape, "attention buffer sizes do not match");
  scratch.resize(n_keys);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  double mx = -INFINITY;
  for (std::size_t k = 0; k < n_keys; ++k) {
    scratch[k] = detail::dot(q.data(), keys.data() + k * d, d) * inv_sqrt_d;
    mx = std::max(mx, scratch[k]);
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < n_keys; ++k) {
    scratch[k] = std::exp(scratch[k] - mx);
    sum += scratch[k];
  }
  float* o = out.data();
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::size_t k = 0; k < n_keys; ++k) {
    const auto w = static_cast<float>(scratch[k] / sum);
    const float* v = values.data() + k * d;
    for (std::size_t c = 0; c < d; ++c) o[c] += w * v[c];
  }
}

/// Causal multi-head attention. `q` is (heads x q_tokens x head_dim); keys and
/// values hold one (tokens x head_dim) tensor per KV head, and query head h
/// reads KV head h / (heads / kv_heads). Query i sits at absolute position
/// causal_offset + i and sees keys [0, causal_offset + i].
inline Tensor attention_forward(const Tensor& q, const std::vector<Tensor>& keys, const std::vector<Tensor>& values,
                                std::size_t causal_offset) {
  require(q.ndim() == 3, ErrorKind::kShape, "q must be heads x q_tokens x head_dim");
  const std::size_t heads = q.dim(0);
  const std::size_t q_tokens = q.dim(1);
  const std::size_t d = q.dim(2);
  require(!keys.empty() && keys.size() == values.size(), ErrorKind::kShape, "need one key/value view per KV head");
  require(heads % keys.size() == 0, ErrorKind::kShape, "heads must be a multiple of KV heads");
  const std::size_t group = heads / keys.size();
  const std::size_t n_keys = keys.front().rows();
  for (std::size_t h = 0; h < keys.size(); ++h) {
    require(keys[h].ndim() == 2 && values[h].ndim() == 2 && keys[h].cols() == d && values[h].cols() == d,
            ErrorKind::kShape, "key/value head_dim mismatch");
    require(keys[h].rows() == n_keys && values[h].rows() == n_keys, ErrorKind::kShape,
            "key and value token counts differ");
  }
  require(causal_offset + q_tokens <= n_keys, ErrorKind::kShape, "queries extend past the available keys");

  Tensor out({heads, q_tokens, d});
  std::vector<double> scratch;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor& k = keys[h / group];
    const Tensor& v = values[h / group];
    for (std::size_t i = 0; i < q_tokens; ++i) {
      const std::size_t off = (h * q_tokens + i) * d;
      attend(q.data().subspan(off, d), k.data(), v.data(), causal_offset + i + 1, out.data().subspan(off, d), scratch);
    }
  }
  return out;
}

}  // namespace akvq
