#pragma once

#include <akvq/error.hpp>
#include <akvq/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace akvq {

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

/// Dimension of a Walsh-Hadamard matrix, d = 2^k.
class HadamardDim {
 public:
  static HadamardDim from_exponent(unsigned k) {
    require(k < 8 * sizeof(std::size_t) - 1, ErrorKind::kParameter, "exponent too large");
    return HadamardDim(k);
  }

  static HadamardDim from_dim(std::size_t d) {
    require(is_power_of_two(d), ErrorKind::kParameter, "dimension " + std::to_string(d) + " is not a power of two");
    unsigned k = 0;
    while ((std::size_t{1} << k) < d) ++k;
    return HadamardDim(k);
  }

  unsigned exponent() const noexcept { return k_; }
  std::size_t dim() const noexcept { return std::size_t{1} << k_; }

 private:
  explicit HadamardDim(unsigned k) : k_(k) {}
  unsigned k_;
};

/// Explicit normalized Hadamard matrix built by the block recursion
/// H_{2d} = [[H_d, H_d], [H_d, -H_d]] / sqrt(2), starting from H_1 = [1].
inline Tensor hadamard_matrix(HadamardDim hd) {
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  std::vector<double> h{1.0};
  std::size_t n = 1;
  for (unsigned level = 0; level < hd.exponent(); ++level) {
    const std::size_t m = 2 * n;
    std::vector<double> next(m * m);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double v = h[r * n + c] * inv_sqrt2;
        next[r * m + c] = v;
        next[r * m + c + n] = v;
        next[(r + n) * m + c] = v;
        next[(r + n) * m + c + n] = -v;
      }
    }
    h = std::move(next);
    n = m;
  }
  std::vector<float> data(h.begin(), h.end());
  return Tensor({n, n}, std::move(data));
}

/// In-place normalized fast Walsh-Hadamard transform. Each butterfly stage
/// carries its own 1/sqrt(2), mirroring the matrix recursion level by level.
inline void fwht_inplace(std::span<float> v) {
  require(is_power_of_two(v.size()), ErrorKind::kParameter,
          "fwht length " + std::to_string(v.size()) + " is not a power of two");
  const float inv_sqrt2 = static_cast<float>(1.0 / std::sqrt(2.0));
  for (std::size_t h = 1; h < v.size(); h *= 2) {
    for (std::size_t i = 0; i < v.size(); i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const float a = v[j];
        const float b = v[j + h];
        v[j] = (a + b) * inv_sqrt2;
        v[j + h] = (a - b) * inv_sqrt2;
      }
    }
  }
}

/// Applies fwht to every row of a 2-D tensor (row length must be 2^k).
inline Tensor fwht_rows(Tensor t) {
  require(t.ndim() >= 1, ErrorKind::kShape, "tensor has no dims");
  for (std::size_t r = 0; r < t.rows(); ++r) fwht_inplace(t.row(r));
  return t;
}

/// Rotates post-RoPE query and key rows by H so that (QH)(KH)^T == QK^T.
inline std::pair<Tensor, Tensor> apply_qk_transform(const Tensor& q_rows, const Tensor& k_rows) {
  require(q_rows.ndim() == 2 && k_rows.ndim() == 2, ErrorKind::kShape, "expected 2-D (tokens x head_dim)");
  require(q_rows.cols() == k_rows.cols(), ErrorKind::kShape, "query/key head_dim mismatch");
  require(is_power_of_two(q_rows.cols()), ErrorKind::kParameter, "head_dim must be a power of two");
  return {fwht_rows(q_rows), fwht_rows(k_rows)};
}

/// Folds H into the per-head column blocks of W_V and H^T into the per-head
/// row blocks of W_O. Both weights are (d x d), laid out as X * W.
inline std::pair<Tensor, Tensor> fold_value_weights(const Tensor& w_v, const Tensor& w_o, std::size_t head_dim) {
  require(w_v.ndim() == 2 && w_o.ndim() == 2, ErrorKind::kShape, "weights must be 2-D");
  require(head_dim >= 1 && is_power_of_two(head_dim), ErrorKind::kParameter, "head_dim must be a power of two");
  require(w_v.cols() % head_dim == 0, ErrorKind::kShape, "head_dim does not divide W_V columns");
  require(w_o.rows() == w_v.cols(), ErrorKind::kShape, "W_O rows must match W_V columns");
  const std::size_t heads = w_v.cols() / head_dim;

  Tensor v_out = w_v;
  std::vector<float> buf(head_dim);
  for (std::size_t r = 0; r < v_out.rows(); ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto block = v_out.row(r).subspan(h * head_dim, head_dim);
      fwht_inplace(block);  // row * H; H is symmetric
    }
  }

  // H^T * B for each head block B of W_O: transform every column of the block.
  Tensor o_out = w_o;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t c = 0; c < o_out.cols(); ++c) {
      for (std::size_t i = 0; i < head_dim; ++i) buf[i] = o_out.at(h * head_dim + i, c);
      fwht_inplace(buf);
      for (std::size_t i = 0; i < head_dim; ++i) o_out.at(h * head_dim + i, c) = buf[i];
    }
  }
  return {std::move(v_out), std::move(o_out)};
}

/// Channel peak-to-mean ratio of mean absolute magnitude over tokens.
inline double outlier_ratio(const Tensor& t) {
  require(t.ndim() == 2 && t.size() > 0, ErrorKind::kShape, "expected non-empty tokens x channels tensor");
  std::vector<double> chan(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) chan[c] += std::fabs(static_cast<double>(t.at(r, c)));
  double peak = 0.0;
  double total = 0.0;
  for (double& v : chan) {
    v /= static_cast<double>(t.rows());
    peak = std::max(peak, v);
    total += v;
  }
  const double mean = total / static_cast<double>(chan.size());
  require(mean > 0.0, ErrorKind::kUndefinedMetric, "mean absolute value is zero");
  return peak / mean;
}

}  // namespace akvq
