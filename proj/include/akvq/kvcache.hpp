#pragma once

#include <akvq/error.hpp>
#include <akvq/quantizer.hpp>
#include <akvq/saliency.hpp>
#include <akvq/tensor.hpp>
#include <akvq/wht.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace akvq {

struct CacheConfig {
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 128;
  std::size_t group_size = kDefaultGroupSize;
  float clip_int2 = 0.8f;
  float clip_int4 = 1.0f;
  std::size_t recent_window = kDefaultRecentWindow;
  std::size_t n_pivot_max = kDefaultPivotMax;
  /// Keys/values handed to the cache are already in the Hadamard basis.
  bool wht_enabled = false;
  /// false: every row is kept as exact f32 (no f16 rounding, no codes).
  bool quantize = true;

  void validate() const {
    require(n_layers >= 1 && n_heads >= 1 && n_kv_heads >= 1 && head_dim >= 1, ErrorKind::kParameter,
            "cache dimensions must be >= 1");
    require(n_heads % n_kv_heads == 0, ErrorKind::kParameter, "n_heads must be divisible by n_kv_heads");
    require(group_size >= 1, ErrorKind::kParameter, "group_size must be >= 1");
    require(clip_int2 > 0.0f && clip_int2 <= 1.0f && clip_int4 > 0.0f && clip_int4 <= 1.0f, ErrorKind::kParameter,
            "clip ratios must be in (0, 1]");
    require(!wht_enabled || is_power_of_two(head_dim), ErrorKind::kParameter,
            "head_dim must be a power of two when WHT is enabled");
  }

  std::size_t kv_head_for(std::size_t query_head) const { return query_head / (n_heads / n_kv_heads); }
};

struct MemoryReport {
  std::size_t bytes_fp16 = 0;
  std::size_t bytes_int4 = 0;
  std::size_t bytes_int2 = 0;
  std::size_t bytes_overhead = 0;
  std::size_t total_elements = 0;
  double effective_bits_per_element = 0.0;
  double compression_ratio_vs_fp16 = 1.0;

  std::size_t total_bytes() const { return bytes_fp16 + bytes_int4 + bytes_int2 + bytes_overhead; }
};

/// Key/value store for a decoder stack with one precision tier per
/// (layer, token). Rows enter as f16 (or exact f32 when quantization is off)
/// and are re-encoded to 4 or 2 bits when they leave the recent window.
class MixedPrecisionKVCache {
 public:
  struct HalfRow {
    std::vector<std::uint16_t> bits;
    friend bool operator==(const HalfRow&, const HalfRow&) = default;
  };
  struct ExactRow {
    std::vector<float> values;
    friend bool operator==(const ExactRow&, const ExactRow&) = default;
  };
  using StoredRow = std::variant<HalfRow, ExactRow, QuantizedRow>;

  struct Entry {
    StoredRow key;
    StoredRow value;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  MixedPrecisionKVCache(CacheConfig cfg, std::vector<LayerPolicy> policies) : cfg_(cfg) {
    cfg_.validate();
    require(policies.size() == cfg_.n_layers, ErrorKind::kParameter,
            "expected " + std::to_string(cfg_.n_layers) + " layer policies, got " + std::to_string(policies.size()));
    policies_.resize(cfg_.n_layers);
    std::vector<bool> seen(cfg_.n_layers, false);
    for (auto& p : policies) {
      require(p.layer_index < cfg_.n_layers && !seen[p.layer_index], ErrorKind::kParameter,
              "policies must cover each layer exactly once");
      p.validate();
      seen[p.layer_index] = true;
      policies_[p.layer_index] = std::move(p);
    }
    storage_.resize(cfg_.n_layers * cfg_.n_kv_heads);
    tiers_.resize(cfg_.n_layers);
  }

  const CacheConfig& config() const noexcept { return cfg_; }
  const LayerPolicy& policy(std::size_t layer) const { return policies_.at(layer); }
  std::size_t length() const noexcept { return modality_.size(); }
  const std::vector<Modality>& modality() const noexcept { return modality_; }
  const std::vector<Tier>& tiers(std::size_t layer) const { return tiers_.at(layer); }

  /// Bulk insert of the prompt: keys/values are (layers x kv_heads x tokens x head_dim).
  void prefill(const Tensor& keys, const Tensor& values, const std::vector<Modality>& modality) {
    require(length() == 0, ErrorKind::kState, "prefill requires an empty cache");
    require(keys.ndim() == 4 && keys.shape() == values.shape(), ErrorKind::kShape,
            "keys/values must share shape layers x kv_heads x tokens x head_dim");
    require(keys.dim(0) == cfg_.n_layers && keys.dim(1) == cfg_.n_kv_heads && keys.dim(3) == cfg_.head_dim,
            ErrorKind::kShape, "prefill tensor does not match cache config");
    const std::size_t tokens = keys.dim(2);
    require(modality.size() == tokens, ErrorKind::kShape, "modality labels must cover every token");

    const std::size_t hd = cfg_.head_dim;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      LayerPolicy visible = policies_[l];
      std::erase_if(visible.pivot_indices, [&](std::size_t p) { return p >= tokens; });
      tiers_[l] = cfg_.quantize ? classify_tokens(tokens, modality, visible) : std::vector<Tier>(tokens, Tier::kFp16);
      for (std::size_t h = 0; h < cfg_.n_kv_heads; ++h) {
        auto& slot = storage_[l * cfg_.n_kv_heads + h];
        slot.reserve(tokens);
        const std::size_t base = (l * cfg_.n_kv_heads + h) * tokens * hd;
        for (std::size_t t = 0; t < tokens; ++t) {
          Entry e{make_full(keys.data().subspan(base + t * hd, hd)),
                  make_full(values.data().subspan(base + t * hd, hd))};
          if (tiers_[l][t] != Tier::kFp16) settle(e, tiers_[l][t]);
          slot.push_back(std::move(e));
        }
      }
    }
    modality_ = modality;
  }

  /// Appends one decoded token; rows are (layers x kv_heads x head_dim).
  void append_decode(const Tensor& k_row, const Tensor& v_row, Modality modality) {
    require(k_row.ndim() == 3 && k_row.shape() == v_row.shape(), ErrorKind::kShape,
            "decode rows must share shape layers x kv_heads x head_dim");
    require(k_row.dim(0) == cfg_.n_layers && k_row.dim(1) == cfg_.n_kv_heads && k_row.dim(2) == cfg_.head_dim,
            ErrorKind::kShape, "decode rows do not match cache config");
    modality_.push_back(modality);
    const std::size_t len = modality_.size();
    const std::size_t hd = cfg_.head_dim;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      tiers_[l].push_back(Tier::kFp16);
      for (std::size_t h = 0; h < cfg_.n_kv_heads; ++h) {
        const std::size_t off = (l * cfg_.n_kv_heads + h) * hd;
        storage_[l * cfg_.n_kv_heads + h].push_back(
            Entry{make_full(k_row.data().subspan(off, hd)), make_full(v_row.data().subspan(off, hd))});
      }
      if (!cfg_.quantize) continue;
      // Only the new token and the one leaving the window can change tier.
      settle_if_due(l, len - 1, len);
      if (len >= policies_[l].recent_window + 1) settle_if_due(l, len - 1 - policies_[l].recent_window, len);
    }
  }

  /// Reconstructs one token's key and value rows.
  void dequantize_token_into(std::size_t layer, std::size_t kv_head, std::size_t token, std::span<float> key,
                             std::span<float> value) const {
    const Entry& e = entry(layer, kv_head, token);
    decode(e.key, key);
    decode(e.value, value);
  }

  std::pair<Tensor, Tensor> dequantized_view(std::size_t layer, std::size_t kv_head) const {
    check_slot(layer, kv_head);
    const std::size_t hd = cfg_.head_dim;
    Tensor k({length(), hd});
    Tensor v({length(), hd});
    for (std::size_t t = 0; t < length(); ++t) dequantize_token_into(layer, kv_head, t, k.row(t), v.row(t));
    return {std::move(k), std::move(v)};
  }

  const Entry& entry(std::size_t layer, std::size_t kv_head, std::size_t token) const {
    check_slot(layer, kv_head);
    require(token < length(), ErrorKind::kParameter, "token index out of range");
    return storage_[layer * cfg_.n_kv_heads + kv_head][token];
  }

  static Tier region_of(const StoredRow& row) {
    if (const auto* q = std::get_if<QuantizedRow>(&row))
      return !q->groups.empty() && q->groups.front().bits == 4 ? Tier::kInt4 : Tier::kInt2;
    return Tier::kFp16;
  }

  /// Token indices currently stored in `region` for one (layer, kv_head).
  std::vector<std::size_t> region_indices(std::size_t layer, std::size_t kv_head, Tier region) const {
    check_slot(layer, kv_head);
    std::vector<std::size_t> out;
    const auto& slot = storage_[layer * cfg_.n_kv_heads + kv_head];
    for (std::size_t t = 0; t < slot.size(); ++t)
      if (region_of(slot[t].key) == region) out.push_back(t);
    return out;
  }

  /// Throws a state error if storage disagrees with the tier map or lengths drift.
  void check_invariants() const {
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      require(tiers_[l].size() == length(), ErrorKind::kState, "tier map length mismatch");
      for (std::size_t h = 0; h < cfg_.n_kv_heads; ++h) {
        const auto& slot = storage_[l * cfg_.n_kv_heads + h];
        require(slot.size() == length(), ErrorKind::kState, "head length mismatch");
        for (std::size_t t = 0; t < slot.size(); ++t) {
          require(region_of(slot[t].key) == tiers_[l][t] && region_of(slot[t].value) == tiers_[l][t],
                  ErrorKind::kState, "region membership disagrees with tier map");
        }
      }
    }
  }

  MemoryReport memory_report() const {
    MemoryReport r;
    for (const auto& slot : storage_) {
      for (const Entry& e : slot) {
        for (const StoredRow* row : {&e.key, &e.value}) {
          if (const auto* hr = std::get_if<HalfRow>(row)) {
            r.bytes_fp16 += 2 * hr->bits.size();
            r.total_elements += hr->bits.size();
          } else if (const auto* er = std::get_if<ExactRow>(row)) {
            r.bytes_fp16 += 4 * er->values.size();
            r.total_elements += er->values.size();
          } else {
            const auto& q = std::get<QuantizedRow>(*row);
            (region_of(*row) == Tier::kInt4 ? r.bytes_int4 : r.bytes_int2) += code_bytes(q);
            r.bytes_overhead += overhead_bytes(q);
            r.total_elements += q.original_len;
          }
        }
      }
    }
    if (r.total_elements > 0) {
      r.effective_bits_per_element = 8.0 * static_cast<double>(r.total_bytes()) / static_cast<double>(r.total_elements);
      r.compression_ratio_vs_fp16 = 16.0 / r.effective_bits_per_element;
    }
    return r;
  }

  friend bool operator==(const MixedPrecisionKVCache& a, const MixedPrecisionKVCache& b) {
    return a.storage_ == b.storage_ && a.tiers_ == b.tiers_ && a.modality_ == b.modality_;
  }

 private:
  void check_slot(std::size_t layer, std::size_t kv_head) const {
    require(layer < cfg_.n_layers && kv_head < cfg_.n_kv_heads, ErrorKind::kParameter,
            "layer/kv_head index out of range");
  }

  StoredRow make_full(std::span<const float> row) const {
    if (!cfg_.quantize) return ExactRow{{row.begin(), row.end()}};
    HalfRow h;
    h.bits.resize(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) h.bits[i] = float_to_half_bits(row[i]);
    return h;
  }

  static void decode(const StoredRow& row, std::span<float> out) {
    if (const auto* hr = std::get_if<HalfRow>(&row)) {
      for (std::size_t i = 0; i < hr->bits.size(); ++i) out[i] = half_bits_to_float(hr->bits[i]);
    } else if (const auto* er = std::get_if<ExactRow>(&row)) {
      std::copy(er->values.begin(), er->values.end(), out.begin());
    } else {
      dequantize_row_into(std::get<QuantizedRow>(row), out);
    }
  }

  QuantParams params_for(Tier tier) const {
    QuantParams p;
    p.bits = tier_bits(tier);
    p.clip_ratio = tier == Tier::kInt4 ? cfg_.clip_int4 : cfg_.clip_int2;
    p.group_size = cfg_.group_size;
    return p;
  }

  // Quantization always reads the f16-rounded row, so prefill and
  // token-by-token appends produce identical codes.
  void settle(Entry& e, Tier tier) const {
    const QuantParams p = params_for(tier);
    std::vector<float> buf(cfg_.head_dim);
    for (StoredRow* row : {&e.key, &e.value}) {
      decode(*row, buf);
      *row = quantize_row(buf, p);
    }
  }

  void settle_if_due(std::size_t layer, std::size_t token, std::size_t len) {
    if (tiers_[layer][token] != Tier::kFp16) return;
    const Tier target = tier_at(token, len, modality_[token], policies_[layer]);
    if (target == Tier::kFp16) return;
    tiers_[layer][token] = target;
    for (std::size_t h = 0; h < cfg_.n_kv_heads; ++h) settle(storage_[layer * cfg_.n_kv_heads + h][token], target);
  }

  CacheConfig cfg_;
  std::vector<LayerPolicy> policies_;
  std::vector<std::vector<Entry>> storage_;  // [layer * n_kv_heads + kv_head][token]
  std::vector<std::vector<Tier>> tiers_;     // [layer][token]
  std::vector<Modality> modality_;
};

/// Writes one AKV1 key/value tensor pair per non-empty (layer, kv_head, region)
/// plus `manifest.txt` listing the token indices behind each file.
inline void dump_snapshot(const MixedPrecisionKVCache& cache, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  require(static_cast<bool>(manifest), ErrorKind::kIo, "cannot write manifest in " + dir.string());
  manifest << "# layer kv_head region key_file value_file token_indices\n";
  const auto& cfg = cache.config();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
      for (Tier region : {Tier::kFp16, Tier::kInt4, Tier::kInt2}) {
        const auto idx = cache.region_indices(l, h, region);
        if (idx.empty()) continue;
        Tensor k({idx.size(), cfg.head_dim});
        Tensor v({idx.size(), cfg.head_dim});
        for (std::size_t i = 0; i < idx.size(); ++i) cache.dequantize_token_into(l, h, idx[i], k.row(i), v.row(i));
        const std::string stem = "L" + std::to_string(l) + "_H" + std::to_string(h) + "_" + to_string(region);
        save_tensor(k, dir / (stem + "_k.akv"));
        save_tensor(v, dir / (stem + "_v.akv"));
        manifest << l << ' ' << h << ' ' << to_string(region) << ' ' << stem << "_k.akv " << stem << "_v.akv ";
        for (std::size_t i = 0; i < idx.size(); ++i) manifest << (i ? "," : "") << idx[i];
        manifest << "\n";
      }
    }
  }
}

}  // namespace akvq
