#pragma once

#include <akvq/error.hpp>
#include <akvq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace akvq {

enum class Modality { kText, kVision };
enum class Tier { kFp16 = 0, kInt4 = 1, kInt2 = 2 };
enum class AttentionPattern { kTsa, kPsa };

inline const char* to_string(Modality m) { return m == Modality::kText ? "text" : "vision"; }
inline const char* to_string(Tier t) {
  switch (t) {
    case Tier::kFp16: return "fp16";
    case Tier::kInt4: return "int4";
    case Tier::kInt2: return "int2";
  }
  return "?";
}
inline const char* to_string(AttentionPattern p) { return p == AttentionPattern::kTsa ? "TSA" : "PSA"; }

inline int tier_bits(Tier t) { return t == Tier::kFp16 ? 16 : (t == Tier::kInt4 ? 4 : 2); }

inline constexpr std::size_t kDefaultRecentWindow = 128;
inline constexpr std::size_t kDefaultPivotMax = 15;
inline constexpr double kDefaultTau = 50.0;
inline constexpr double kDefaultGamma = 2.0;
inline constexpr std::size_t kDefaultExcludedPrefix = 5;

struct TokenMeta {
  std::size_t index = 0;
  Modality modality = Modality::kText;
  Tier tier = Tier::kFp16;
};

struct LayerPolicy {
  std::size_t layer_index = 0;
  AttentionPattern pattern = AttentionPattern::kPsa;
  std::set<std::size_t> pivot_indices;
  std::size_t recent_window = kDefaultRecentWindow;
  std::size_t n_pivot_max = kDefaultPivotMax;
  /// Off by default: text tokens in PSA layers fall to int2 unless set.
  bool protect_text_in_psa = false;
  /// Baseline override: every token (recent ones included) gets this tier.
  std::optional<Tier> uniform_tier;

  void validate() const {
    require(pivot_indices.empty() || pattern == AttentionPattern::kPsa, ErrorKind::kParameter,
            "pivot indices are only allowed on PSA layers");
    require(pivot_indices.size() <= n_pivot_max, ErrorKind::kParameter, "more pivots than n_pivot_max");
  }
};

/// Tier a token settles into once it is outside the recent window.
inline Tier settled_tier(std::size_t index, Modality modality, const LayerPolicy& policy) {
  if (policy.uniform_tier) return *policy.uniform_tier;
  if (policy.pattern == AttentionPattern::kTsa) return modality == Modality::kText ? Tier::kInt4 : Tier::kInt2;
  if (policy.pivot_indices.count(index)) return Tier::kFp16;
  if (policy.protect_text_in_psa && modality == Modality::kText) return Tier::kInt4;
  return Tier::kInt2;
}

/// Tier of token `index` when the sequence holds `seq_len` tokens.
inline Tier tier_at(std::size_t index, std::size_t seq_len, Modality modality, const LayerPolicy& policy) {
  if (!policy.uniform_tier && index + policy.recent_window >= seq_len) return Tier::kFp16;
  return settled_tier(index, modality, policy);
}

inline std::vector<Tier> classify_tokens(std::size_t seq_len, const std::vector<Modality>& modality,
                                         const LayerPolicy& policy) {
  require(modality.size() == seq_len, ErrorKind::kParameter, "modality labels must cover the sequence");
  policy.validate();
  for (std::size_t p : policy.pivot_indices)
    require(p < seq_len, ErrorKind::kParameter, "pivot index " + std::to_string(p) + " beyond sequence");
  std::vector<Tier> tiers(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) tiers[i] = tier_at(i, seq_len, modality[i], policy);
  return tiers;
}

inline std::vector<TokenMeta> token_meta(const std::vector<Modality>& modality, const std::vector<Tier>& tiers) {
  require(modality.size() == tiers.size(), ErrorKind::kParameter, "label/tier length mismatch");
  std::vector<TokenMeta> out(modality.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {i, modality[i], tiers[i]};
  return out;
}

// ---------------------------------------------------------------------------
// Attention pattern analysis

struct ModalityAttentionStats {
  std::vector<std::optional<double>> text_mean;    // per head
  std::vector<std::optional<double>> vision_mean;  // per head
  std::size_t excluded_prefix = kDefaultExcludedPrefix;
};

/// Mean attention received per key, by modality, over all (query, key) pairs
/// of each head. Keys before `excluded_prefix` are dropped (sink tokens).
inline ModalityAttentionStats modality_attention_stats(const Tensor& attn, const std::vector<Modality>& modality,
                                                       std::size_t excluded_prefix = kDefaultExcludedPrefix) {
  require(attn.ndim() == 3, ErrorKind::kInput, "attention must be heads x queries x keys");
  const std::size_t heads = attn.dim(0);
  const std::size_t queries = attn.dim(1);
  const std::size_t keys = attn.dim(2);
  require(modality.size() == keys, ErrorKind::kInput, "modality labels must cover all key tokens");
  require(excluded_prefix <= keys, ErrorKind::kInput, "excluded_prefix larger than the sequence");

  std::size_t n_text = 0;
  std::size_t n_vision = 0;
  for (std::size_t k = excluded_prefix; k < keys; ++k) (modality[k] == Modality::kText ? n_text : n_vision)++;

  ModalityAttentionStats stats;
  stats.excluded_prefix = excluded_prefix;
  const auto data = attn.data();
  for (std::size_t h = 0; h < heads; ++h) {
    double text_sum = 0.0;
    double vision_sum = 0.0;
    for (std::size_t q = 0; q < queries; ++q) {
      const float* row = data.data() + (h * queries + q) * keys;
      double row_sum = 0.0;
      for (std::size_t k = 0; k < keys; ++k) row_sum += row[k];
      require(std::fabs(row_sum - 1.0) <= 1e-4, ErrorKind::kInput,
              "attention row (head " + std::to_string(h) + ", query " + std::to_string(q) + ") does not sum to 1");
      for (std::size_t k = excluded_prefix; k < keys; ++k)
        (modality[k] == Modality::kText ? text_sum : vision_sum) += row[k];
    }
    auto mean = [&](double sum, std::size_t n) -> std::optional<double> {
      if (n == 0 || queries == 0) return std::nullopt;
      return sum / static_cast<double>(n * queries);
    };
    stats.text_mean.push_back(mean(text_sum, n_text));
    stats.vision_mean.push_back(mean(vision_sum, n_vision));
  }
  return stats;
}

struct TsaDetection {
  std::set<std::size_t> tsa_layers;
  std::vector<std::size_t> skipped;  // layers lacking one modality's statistics
};

inline TsaDetection detect_tsa_layers(const std::vector<ModalityAttentionStats>& stats_per_layer,
                                      double gamma = kDefaultGamma) {
  require(gamma > 1.0, ErrorKind::kParameter, "gamma must be > 1");
  TsaDetection out;
  for (std::size_t layer = 0; layer < stats_per_layer.size(); ++layer) {
    const auto& s = stats_per_layer[layer];
    double text = 0.0;
    double vision = 0.0;
    bool complete = !s.text_mean.empty() && s.text_mean.size() == s.vision_mean.size();
    for (std::size_t h = 0; complete && h < s.text_mean.size(); ++h) {
      if (!s.text_mean[h] || !s.vision_mean[h]) {
        complete = false;
        break;
      }
      text += *s.text_mean[h];
      vision += *s.vision_mean[h];
    }
    if (!complete) {
      out.skipped.push_back(layer);
      continue;
    }
    const double heads = static_cast<double>(s.text_mean.size());
    if (text / heads > gamma * (vision / heads)) out.tsa_layers.insert(layer);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Massive-activation pivots

/// Per-token max absolute residual value.
inline std::vector<double> token_scores(const Tensor& residual) {
  require(residual.ndim() == 2 && residual.rows() >= 1, ErrorKind::kShape, "residual must be tokens x hidden");
  std::vector<double> score(residual.rows(), 0.0);
  for (std::size_t t = 0; t < residual.rows(); ++t)
    for (float v : residual.row(t)) score[t] = std::max(score[t], std::fabs(static_cast<double>(v)));
  return score;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorKind::kParameter, "median of empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lo + hi) / 2.0;
}

/// Tokens whose score exceeds tau x median score, strongest first and capped
/// at n_pivot_max. With no candidate the sequence start is returned.
inline std::vector<std::size_t> detect_pivot_tokens(const Tensor& residual, double tau = kDefaultTau,
                                                    std::size_t n_pivot_max = kDefaultPivotMax) {
  require(tau > 1.0, ErrorKind::kParameter, "tau must be > 1");
  const auto score = token_scores(residual);
  const double threshold = tau * median(score);
  std::vector<std::size_t> hits;
  for (std::size_t t = 0; t < score.size(); ++t)
    if (score[t] > threshold) hits.push_back(t);
  std::stable_sort(hits.begin(), hits.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  if (hits.size() > n_pivot_max) hits.resize(n_pivot_max);
  if (hits.empty()) hits.push_back(0);
  return hits;
}

// ---------------------------------------------------------------------------
// Policies

/// Per-layer policies from a TSA layer set; PSA layers share `pivots`.
inline std::vector<LayerPolicy> make_policies(std::size_t n_layers, const std::set<std::size_t>& tsa_layers,
                                              const std::vector<std::size_t>& pivots,
                                              std::size_t recent_window = kDefaultRecentWindow,
                                              std::size_t n_pivot_max = kDefaultPivotMax) {
  std::vector<LayerPolicy> out(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    out[l].layer_index = l;
    out[l].recent_window = recent_window;
    out[l].n_pivot_max = n_pivot_max;
    if (tsa_layers.count(l)) {
      out[l].pattern = AttentionPattern::kTsa;
    } else {
      out[l].pattern = AttentionPattern::kPsa;
      for (std::size_t i = 0; i < pivots.size() && i < n_pivot_max; ++i) out[l].pivot_indices.insert(pivots[i]);
    }
  }
  return out;
}

struct ModelPatternEntry {
  const char* model;
  std::size_t n_layers;
  std::size_t tsa_end;  // layers [0, tsa_end) are TSA
};

/// Observed TSA/PSA layer split for several vision-language models.
inline constexpr ModelPatternEntry kModelPatterns[] = {
    {"llava-v1.5-7b", 32, 2},        {"llava-v1.5-13b", 32, 2},  {"llava-v1.6-vicuna-7b", 32, 2},
    {"llava-v1.6-mistral-7b", 32, 0}, {"qwen2-vl-7b", 28, 2},
};

inline std::set<std::size_t> configured_tsa_layers(const std::string& model) {
  for (const auto& e : kModelPatterns) {
    if (model == e.model) {
      std::set<std::size_t> s;
      for (std::size_t l = 0; l < e.tsa_end; ++l) s.insert(l);
      return s;
    }
  }
  fail(ErrorKind::kParameter, "unknown model pattern '" + model + "'");
}

/// Text form of a policy set:
///
///   # comment
///   n_layers = 32
///   recent_window = 128
///   n_pivot_max = 15
///   tau = 50
///   gamma = 2
///   protect_text_in_psa = false
///   pivots = 0, 57
///   layer.0 = TSA
///   layer.1 = PSA
///
/// Layers not listed default to PSA. `pivots` applies to every PSA layer.
struct PolicyFile {
  std::size_t n_layers = 0;
  std::vector<AttentionPattern> patterns;
  std::vector<std::size_t> pivots;
  std::size_t recent_window = kDefaultRecentWindow;
  std::size_t n_pivot_max = kDefaultPivotMax;
  double tau = kDefaultTau;
  double gamma = kDefaultGamma;
  bool protect_text_in_psa = false;

  std::vector<LayerPolicy> to_policies() const {
    std::set<std::size_t> tsa;
    for (std::size_t l = 0; l < patterns.size(); ++l)
      if (patterns[l] == AttentionPattern::kTsa) tsa.insert(l);
    auto out = make_policies(n_layers, tsa, pivots, recent_window, n_pivot_max);
    for (auto& p : out) p.protect_text_in_psa = protect_text_in_psa;
    return out;
  }
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(v, &pos);
    if (pos != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "bad integer for " + key + ": '" + v + "'");
  }
}

inline double parse_real(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "bad number for " + key + ": '" + v + "'");
  }
}
}  // namespace detail

inline PolicyFile parse_policy(std::istream& in) {
  PolicyFile pf;
  std::map<std::size_t, AttentionPattern> layers;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kFormat, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key == "n_layers") {
      pf.n_layers = detail::parse_size(val, key);
    } else if (key == "recent_window") {
      pf.recent_window = detail::parse_size(val, key);
    } else if (key == "n_pivot_max") {
      pf.n_pivot_max = detail::parse_size(val, key);
    } else if (key == "tau") {
      pf.tau = detail::parse_real(val, key);
    } else if (key == "gamma") {
      pf.gamma = detail::parse_real(val, key);
    } else if (key == "protect_text_in_psa") {
      require(val == "true" || val == "false", ErrorKind::kFormat, "protect_text_in_psa must be true/false");
      pf.protect_text_in_psa = val == "true";
    } else if (key == "pivots") {
      pf.pivots.clear();
      std::stringstream ss(val);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) pf.pivots.push_back(detail::parse_size(item, key));
      }
    } else if (key.rfind("layer.", 0) == 0) {
      const std::size_t l = detail::parse_size(key.substr(6), key);
      if (val == "TSA") {
        layers[l] = AttentionPattern::kTsa;
      } else if (val == "PSA") {
        layers[l] = AttentionPattern::kPsa;
      } else {
        fail(ErrorKind::kFormat, "line " + std::to_string(lineno) + ": pattern must be TSA or PSA");
      }
    } else {
      fail(ErrorKind::kFormat, "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (!layers.empty()) pf.n_layers = std::max(pf.n_layers, layers.rbegin()->first + 1);
  pf.patterns.assign(pf.n_layers, AttentionPattern::kPsa);
  for (const auto& [l, p] : layers) pf.patterns[l] = p;
  return pf;
}

inline void write_policy(std::ostream& out, const PolicyFile& pf) {
  out << "n_layers = " << pf.n_layers << "\n";
  out << "recent_window = " << pf.recent_window << "\n";
  out << "n_pivot_max = " << pf.n_pivot_max << "\n";
  out << "tau = " << pf.tau << "\n";
  out << "gamma = " << pf.gamma << "\n";
  out << "protect_text_in_psa = " << (pf.protect_text_in_psa ? "true" : "false") << "\n";
  out << "pivots = ";
  for (std::size_t i = 0; i < pf.pivots.size(); ++i) out << (i ? ", " : "") << pf.pivots[i];
  out << "\n";
  for (std::size_t l = 0; l < pf.patterns.size(); ++l) out << "layer." << l << " = " << to_string(pf.patterns[l]) << "\n";
}

inline PolicyFile load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  return parse_policy(in);
}

inline void save_policy(const PolicyFile& pf, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  write_policy(out, pf);
}

/// Modality labels: whitespace-separated `text`/`vision` (or `t`/`v`).
inline std::vector<Modality> parse_modality_labels(std::istream& in) {
  std::vector<Modality> out;
  std::string tok;
  while (in >> tok) {
    if (tok == "text" || tok == "t") {
      out.push_back(Modality::kText);
    } else if (tok == "vision" || tok == "v") {
      out.push_back(Modality::kVision);
    } else {
      fail(ErrorKind::kInput, "unknown modality label '" + tok + "'");
    }
  }
  return out;
}

inline std::vector<Modality> load_modality_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  return parse_modality_labels(in);
}

}  // namespace akvq
