#pragma once

#include <akvq/attention.hpp>
#include <akvq/error.hpp>
#include <akvq/kvcache.hpp>
#include <akvq/saliency.hpp>
#include <akvq/tensor.hpp>
#include <akvq/wht.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace akvq {

/// Knobs for the synthetic K/V/Q streams. The streams carry the phenomena the
/// method targets: Key channel outliers, text-dominant attention in TSA
/// layers, and attention sinks at massive-activation tokens in PSA layers.
struct SyntheticShape {
  double vision_fraction = 0.75;  // of the prefill
  std::size_t vision_start = 16;
  std::size_t hot_channels = 2;
  double hot_multiplier = 20.0;
  std::size_t injected_pivots = 3;  // in addition to token 0
  std::size_t residual_hidden = 256;
  double massive_magnitude = 1000.0;
  double query_noise = 0.5;
  double sink_key = 12.0;
  double sink_query = 8.0;
  double text_key = 6.0;
  double text_query = 6.0;
};

struct SimConfig {
  CacheConfig cache;
  std::size_t seq_len_prefill = 512;
  std::size_t decode_steps = 64;
  double rope_base = kDefaultRopeBase;
  std::uint64_t seed = 1;
  SyntheticShape shape;
  std::set<std::size_t> tsa_layers{0, 1};
  double tau = kDefaultTau;
  bool protect_text_in_psa = false;

  void validate() const {
    cache.validate();
    require(seq_len_prefill >= 1, ErrorKind::kParameter, "seq_len_prefill must be >= 1");
    require(cache.head_dim % 2 == 0, ErrorKind::kParameter, "RoPE needs an even head_dim");
    require(shape.vision_fraction >= 0.0 && shape.vision_fraction <= 1.0, ErrorKind::kParameter,
            "vision_fraction must be in [0, 1]");
    require(shape.hot_channels <= cache.head_dim, ErrorKind::kParameter, "more hot channels than head_dim");
  }

  std::size_t total_tokens() const { return seq_len_prefill + decode_steps; }
};

/// Desk-scale analogue of the LLaVA-v1.5-7B setup: 32 layers, TSA on {0, 1},
/// group 128, clip 0.8 / 1.0, recent window 128, up to 15 pivots.
inline SimConfig paper_default_config(std::uint64_t seed = 1) {
  SimConfig cfg;
  cfg.cache.n_layers = 32;
  cfg.cache.n_heads = 2;
  cfg.cache.n_kv_heads = 1;
  cfg.cache.head_dim = 128;
  cfg.cache.group_size = 128;
  cfg.cache.clip_int2 = 0.8f;
  cfg.cache.clip_int4 = 1.0f;
  cfg.cache.recent_window = 128;
  cfg.cache.n_pivot_max = 15;
  cfg.cache.wht_enabled = true;
  cfg.seq_len_prefill = 512;
  cfg.decode_steps = 64;
  cfg.seed = seed;
  cfg.tsa_layers = {0, 1};
  return cfg;
}

/// Generated data for one seed. All key/query rows are post-RoPE.
struct SyntheticStream {
  std::vector<Modality> modality;          // total_tokens
  std::vector<std::size_t> true_pivots;    // injected massive-activation tokens
  Tensor residual;                         // prefill tokens x residual_hidden
  Tensor keys;                             // layers x kv_heads x total_tokens x head_dim
  Tensor values;                           // same
  Tensor queries;                          // layers x heads x decode_steps x head_dim
};

inline SyntheticStream make_stream(const SimConfig& cfg) {
  cfg.validate();
  const auto& cc = cfg.cache;
  const std::size_t P = cfg.seq_len_prefill;
  const std::size_t T = cfg.total_tokens();
  const std::size_t S = cfg.decode_steps;
  const std::size_t hd = cc.head_dim;
  const auto& sh = cfg.shape;
  Rng rng(cfg.seed);

  SyntheticStream s;
  s.modality.assign(T, Modality::kText);
  const auto n_vision = static_cast<std::size_t>(std::llround(sh.vision_fraction * static_cast<double>(P)));
  const std::size_t v_begin = std::min(sh.vision_start, P);
  const std::size_t v_end = std::min(P, v_begin + n_vision);
  for (std::size_t t = v_begin; t < v_end; ++t) s.modality[t] = Modality::kVision;

  // Pivots: the sequence start plus a few tokens inside the vision span.
  std::set<std::size_t> pivots{0};
  if (v_end > v_begin + 1) {
    std::uniform_int_distribution<std::size_t> pick(v_begin + 1, v_end - 1);
    while (pivots.size() < 1 + std::min(sh.injected_pivots, v_end - v_begin - 1)) pivots.insert(pick(rng));
  }
  s.true_pivots.assign(pivots.begin(), pivots.end());

  s.residual = Tensor({P, sh.residual_hidden});
  fill_random(s.residual.data(), rng, Gaussian{0.0, 1.0});
  for (std::size_t p : pivots)
    for (std::size_t c = 0; c < std::min<std::size_t>(2, sh.residual_hidden); ++c)
      s.residual.at(p, c) = static_cast<float>(sh.massive_magnitude * (c % 2 ? -1.0 : 1.0));

  s.keys = Tensor({cc.n_layers, cc.n_kv_heads, T, hd});
  s.values = Tensor({cc.n_layers, cc.n_kv_heads, T, hd});
  s.queries = Tensor({cc.n_layers, cc.n_heads, S, hd});
  const std::size_t hot_begin = hd / 4;
  const std::size_t band = std::max<std::size_t>(1, hd / 8);
  const std::size_t sink_begin = hd - band;        // lowest RoPE frequencies
  const std::size_t text_begin = hd - 2 * band;

  auto unit_in = [&](std::size_t begin, std::size_t len) {
    std::vector<float> u(hd, 0.0f);
    fill_random(std::span<float>(u).subspan(begin, len), rng, Gaussian{0.0, 1.0});
    double n = 0.0;
    for (float x : u) n += static_cast<double>(x) * x;
    n = std::sqrt(n);
    for (float& x : u) x = static_cast<float>(x / n);
    return u;
  };

  std::vector<float> row(hd);
  for (std::size_t l = 0; l < cc.n_layers; ++l) {
    const bool tsa = cfg.tsa_layers.count(l) > 0;
    std::vector<std::vector<float>> sink(cc.n_kv_heads);
    std::vector<std::vector<float>> text(cc.n_kv_heads);
    for (std::size_t h = 0; h < cc.n_kv_heads; ++h) {
      sink[h] = unit_in(sink_begin, band);
      text[h] = unit_in(text_begin, band);
      for (std::size_t t = 0; t < T; ++t) {
        auto k = s.keys.data().subspan(s.keys.offset({l, h, t, 0}), hd);
        fill_random(k, rng, Gaussian{0.0, 1.0});
        for (std::size_t c = hot_begin; c < hot_begin + sh.hot_channels && c < hd; ++c)
          k[c] = static_cast<float>(k[c] * sh.hot_multiplier);
        if (tsa && s.modality[t] == Modality::kText)
          for (std::size_t c = 0; c < hd; ++c) k[c] += static_cast<float>(sh.text_key) * text[h][c];
        if (!tsa && pivots.count(t))
          for (std::size_t c = 0; c < hd; ++c) k[c] += static_cast<float>(sh.sink_key) * sink[h][c];
        rope_row_inplace(k, t, cfg.rope_base);
        fill_random(s.values.data().subspan(s.values.offset({l, h, t, 0}), hd), rng, Gaussian{0.0, 1.0});
      }
    }
    for (std::size_t qh = 0; qh < cc.n_heads; ++qh) {
      const std::size_t kvh = cc.kv_head_for(qh);
      for (std::size_t step = 0; step < S; ++step) {
        auto q = s.queries.data().subspan(s.queries.offset({l, qh, step, 0}), hd);
        fill_random(q, rng, Gaussian{0.0, sh.query_noise});
        const auto& dir = tsa ? text[kvh] : sink[kvh];
        const double w = tsa ? sh.text_query : sh.sink_query;
        for (std::size_t c = 0; c < hd; ++c) q[c] += static_cast<float>(w) * dir[c];
        rope_row_inplace(q, P + step, cfg.rope_base);
      }
    }
  }
  return s;
}

/// One way of caching the stream: its cache configuration and layer policies.
struct Variant {
  std::string name;
  CacheConfig cache;
  std::vector<LayerPolicy> policies;
};

/// Method names understood by make_variant.
inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> names = {"fp16",         "exact-wht", "rtn-int4", "rtn-int2",
                                                 "rtn-int2-wht", "akvq-tsa",  "akvq",     "akvq-no-wht"};
  return names;
}

/// Builds a method from the base config:
///   fp16         every token f16, no WHT
///   exact-wht    no quantization (exact f32), WHT on
///   rtn-int4/2   every token 4/2-bit with clip 1.0, no WHT, no salient tokens
///   rtn-int2-wht rtn-int2 in the Hadamard basis
///   akvq-tsa     WHT + recent window + text at int4 in TSA layers (no pivots)
///   akvq         akvq-tsa + detected pivots kept f16 in PSA layers
///   akvq-no-wht  akvq without WHT
inline Variant make_variant(const std::string& name, const SimConfig& cfg, const std::vector<std::size_t>& pivots) {
  Variant v{name, cfg.cache, {}};
  const std::size_t L = cfg.cache.n_layers;
  auto uniform = [&](Tier t) {
    auto ps = make_policies(L, {}, {}, 0, cfg.cache.n_pivot_max);
    for (auto& p : ps) p.uniform_tier = t;
    return ps;
  };
  if (name == "fp16") {
    v.cache.wht_enabled = false;
    v.policies = uniform(Tier::kFp16);
  } else if (name == "exact-wht") {
    v.cache.wht_enabled = true;
    v.cache.quantize = false;
    v.policies = uniform(Tier::kFp16);
  } else if (name == "rtn-int4" || name == "rtn-int2" || name == "rtn-int2-wht") {
    v.cache.wht_enabled = name == "rtn-int2-wht";
    v.cache.clip_int2 = 1.0f;
    v.cache.clip_int4 = 1.0f;
    v.policies = uniform(name == "rtn-int4" ? Tier::kInt4 : Tier::kInt2);
  } else if (name == "akvq-tsa") {
    v.cache.wht_enabled = true;
    v.policies = make_policies(L, cfg.tsa_layers, {}, cfg.cache.recent_window, cfg.cache.n_pivot_max);
  } else if (name == "akvq" || name == "akvq-no-wht") {
    v.cache.wht_enabled = name == "akvq";
    v.policies = make_policies(L, cfg.tsa_layers, pivots, cfg.cache.recent_window, cfg.cache.n_pivot_max);
  } else {
    fail(ErrorKind::kParameter, "unknown method '" + name + "'");
  }
  if (!v.policies.front().uniform_tier)
    for (auto& p : v.policies) p.protect_text_in_psa = cfg.protect_text_in_psa;
  return v;
}

struct StepRecord {
  std::size_t layer = 0;
  std::size_t step = 0;
  double cosine = 1.0;
  double max_err = 0.0;
  double rel_frob = 0.0;
};

struct SimMetrics {
  std::string method;
  std::vector<StepRecord> records;
  std::vector<double> layer_cosine;   // mean over steps
  std::vector<double> layer_max_err;  // max over steps
  double mean_cosine = 1.0;
  double min_cosine = 1.0;
  double max_abs_err = 0.0;
  double rel_frob = 0.0;  // ||out - base||_F / ||base||_F over every layer and step
  double key_mse = 0.0;   // cached keys vs exact keys, original basis
  MemoryReport memory;
  std::vector<std::size_t> pivots;  // pivots detected from the residual stream
};

namespace detail {

inline double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 && bb == 0.0) return 1.0;
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace detail

/// Runs prefill + decode for every variant against an exact-f32 baseline on
/// the same stream. At each decode step the new token is appended and its
/// query attends over the whole cache; the per-layer output (all heads
/// concatenated, pre-W_O, original basis) is compared with the baseline.
inline std::vector<SimMetrics> simulate(const SimConfig& cfg, const SyntheticStream& stream,
                                        const std::vector<Variant>& variants) {
  const std::size_t P = cfg.seq_len_prefill;
  const std::size_t T = cfg.total_tokens();
  const std::size_t S = cfg.decode_steps;
  const std::size_t L = cfg.cache.n_layers;
  const std::size_t KVH = cfg.cache.n_kv_heads;
  const std::size_t H = cfg.cache.n_heads;
  const std::size_t hd = cfg.cache.head_dim;
  std::vector<double> scratch;

  // Baseline outputs [step][layer][head * hd].
  std::vector<float> base_out(S * L * H * hd);
  for (std::size_t step = 0; step < S; ++step) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t kvh = cfg.cache.kv_head_for(h);
        const auto q = stream.queries.data().subspan(stream.queries.offset({l, h, step, 0}), hd);
        const std::size_t base = stream.keys.offset({l, kvh, 0, 0});
        attend(q, stream.keys.data().subspan(base, T * hd), stream.values.data().subspan(base, T * hd), P + step + 1,
               std::span<float>(base_out).subspan(((step * L + l) * H + h) * hd, hd), scratch);
      }
    }
  }

  std::vector<SimMetrics> results;
  for (const Variant& var : variants) {
    require(var.cache.n_layers == L && var.cache.n_kv_heads == KVH && var.cache.n_heads == H &&
                var.cache.head_dim == hd,
            ErrorKind::kParameter, "variant '" + var.name + "' does not match the stream shape");
    const bool wht = var.cache.wht_enabled;
    auto to_cache_basis = [&](std::span<float> r) {
      if (wht) fwht_inplace(r);
    };

    // Inputs in the cache basis: K' = K H (after RoPE), V' = X W_V H.
    Tensor keys = stream.keys;
    Tensor values = stream.values;
    if (wht) {
      keys = fwht_rows(std::move(keys));
      values = fwht_rows(std::move(values));
    }

    MixedPrecisionKVCache cache(var.cache, var.policies);
    {
      Tensor pk({L, KVH, P, hd});
      Tensor pv({L, KVH, P, hd});
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < KVH; ++h) {
          const auto src = keys.offset({l, h, 0, 0});
          const auto dst = pk.offset({l, h, 0, 0});
          std::copy_n(keys.data().begin() + src, P * hd, pk.data().begin() + dst);
          std::copy_n(values.data().begin() + src, P * hd, pv.data().begin() + dst);
        }
      cache.prefill(pk, pv, std::vector<Modality>(stream.modality.begin(), stream.modality.begin() + P));
    }

    // Materialized views, refreshed only where storage can change.
    std::vector<float> view_k(L * KVH * T * hd);
    std::vector<float> view_v(L * KVH * T * hd);
    auto refresh = [&](std::size_t l, std::size_t h, std::size_t t) {
      const std::size_t off = ((l * KVH + h) * T + t) * hd;
      cache.dequantize_token_into(l, h, t, std::span<float>(view_k).subspan(off, hd),
                                  std::span<float>(view_v).subspan(off, hd));
    };
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < KVH; ++h)
        for (std::size_t t = 0; t < P; ++t) refresh(l, h, t);

    SimMetrics m;
    m.method = var.name;
    m.layer_cosine.assign(L, 0.0);
    m.layer_max_err.assign(L, 0.0);
    double diff_sq = 0.0;
    double base_sq = 0.0;
    std::vector<float> q(hd);
    std::vector<float> out(H * hd);
    Tensor k_row({L, KVH, hd});
    Tensor v_row({L, KVH, hd});
    for (std::size_t step = 0; step < S; ++step) {
      const std::size_t t = P + step;
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < KVH; ++h) {
          std::copy_n(keys.data().begin() + keys.offset({l, h, t, 0}), hd, k_row.data().begin() + (l * KVH + h) * hd);
          std::copy_n(values.data().begin() + values.offset({l, h, t, 0}), hd,
                      v_row.data().begin() + (l * KVH + h) * hd);
        }
      cache.append_decode(k_row, v_row, stream.modality[t]);
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t w = cache.policy(l).recent_window;
        for (std::size_t h = 0; h < KVH; ++h) {
          refresh(l, h, t);
          if (t >= w) refresh(l, h, t - w);
        }
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t kvh = cfg.cache.kv_head_for(h);
          const auto src = stream.queries.data().subspan(stream.queries.offset({l, h, step, 0}), hd);
          std::copy(src.begin(), src.end(), q.begin());
          to_cache_basis(q);
          const std::size_t base = (l * KVH + kvh) * T * hd;
          auto o = std::span<float>(out).subspan(h * hd, hd);
          attend(q, std::span<const float>(view_k).subspan(base, T * hd),
                 std::span<const float>(view_v).subspan(base, T * hd), t + 1, o, scratch);
          to_cache_basis(o);  // H^T == H: folded into W_O
        }
        const auto ref = std::span<const float>(base_out).subspan((step * L + l) * H * hd, H * hd);
        StepRecord rec{l, step, detail::cosine(ref, out), 0.0, 0.0};
        double d2 = 0.0, b2 = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
          const double d = static_cast<double>(out[i]) - ref[i];
          rec.max_err = std::max(rec.max_err, std::fabs(d));
          d2 += d * d;
          b2 += static_cast<double>(ref[i]) * ref[i];
        }
        rec.rel_frob = b2 > 0.0 ? std::sqrt(d2 / b2) : std::sqrt(d2);
        diff_sq += d2;
        base_sq += b2;
        m.layer_cosine[l] += rec.cosine / static_cast<double>(S);
        m.layer_max_err[l] = std::max(m.layer_max_err[l], rec.max_err);
        m.records.push_back(rec);
      }
    }

    if (!m.records.empty()) {
      double sum = 0.0;
      m.min_cosine = 1.0;
      for (const auto& r : m.records) {
        sum += r.cosine;
        m.min_cosine = std::min(m.min_cosine, r.cosine);
        m.max_abs_err = std::max(m.max_abs_err, r.max_err);
      }
      m.mean_cosine = sum / static_cast<double>(m.records.size());
    }
    m.rel_frob = base_sq > 0.0 ? std::sqrt(diff_sq / base_sq) : std::sqrt(diff_sq);

    double key_err = 0.0;
    std::vector<float> kr(hd);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < KVH; ++h)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t off = ((l * KVH + h) * T + t) * hd;
          std::copy_n(view_k.begin() + off, hd, kr.begin());
          to_cache_basis(kr);
          const auto ex = stream.keys.data().subspan(off, hd);
          for (std::size_t c = 0; c < hd; ++c) {
            const double d = static_cast<double>(kr[c]) - ex[c];
            key_err += d * d;
          }
        }
    m.key_mse = key_err / static_cast<double>(L * KVH * T * hd);
    m.memory = cache.memory_report();
    results.push_back(std::move(m));
  }
  return results;
}

inline std::vector<std::size_t> detect_stream_pivots(const SimConfig& cfg, const SyntheticStream& stream) {
  return detect_pivot_tokens(stream.residual, cfg.tau, cfg.cache.n_pivot_max);
}

/// Runs one configuration (cfg.cache with the given policies) against the
/// exact baseline.
inline SimMetrics run_pipeline(const SimConfig& cfg, const std::vector<LayerPolicy>& policies) {
  const auto stream = make_stream(cfg);
  auto out = simulate(cfg, stream, {Variant{"run", cfg.cache, policies}});
  out.front().pivots = detect_stream_pivots(cfg, stream);
  return std::move(out.front());
}

/// Generates the stream once, detects pivots, and runs each named method.
inline std::vector<SimMetrics> run_methods(const SimConfig& cfg, const std::vector<std::string>& methods) {
  const auto stream = make_stream(cfg);
  const auto pivots = detect_stream_pivots(cfg, stream);
  std::vector<Variant> vars;
  for (const auto& name : methods) vars.push_back(make_variant(name, cfg, pivots));
  auto out = simulate(cfg, stream, vars);
  for (auto& m : out) m.pivots = pivots;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One line per (layer, step): method layer step cosine max_err rel_frob.
inline void write_records(std::ostream& out, const SimMetrics& m) {
  for (const auto& r : m.records)
    out << m.method << ' ' << r.layer << ' ' << r.step << ' ' << format_real(r.cosine) << ' '
        << format_real(r.max_err) << ' ' << format_real(r.rel_frob) << '\n';
}

/// key=value summary lines, one block per method.
inline void write_summary(std::ostream& out, const SimConfig& cfg, const std::vector<SimMetrics>& ms) {
  out << "seed=" << cfg.seed << '\n';
  out << "layers=" << cfg.cache.n_layers << '\n';
  out << "heads=" << cfg.cache.n_heads << '\n';
  out << "kv_heads=" << cfg.cache.n_kv_heads << '\n';
  out << "head_dim=" << cfg.cache.head_dim << '\n';
  out << "prefill=" << cfg.seq_len_prefill << '\n';
  out << "decode_steps=" << cfg.decode_steps << '\n';
  out << "group_size=" << cfg.cache.group_size << '\n';
  out << "clip_int2=" << format_real(cfg.cache.clip_int2) << '\n';
  out << "clip_int4=" << format_real(cfg.cache.clip_int4) << '\n';
  out << "recent_window=" << cfg.cache.recent_window << '\n';
  out << "n_pivot_max=" << cfg.cache.n_pivot_max << '\n';
  std::string methods;
  for (const auto& m : ms) methods += (methods.empty() ? "" : ",") + m.method;
  out << "methods=" << methods << '\n';
  if (!ms.empty()) {
    out << "pivots=";
    for (std::size_t i = 0; i < ms.front().pivots.size(); ++i) out << (i ? "," : "") << ms.front().pivots[i];
    out << '\n';
  }
  for (const auto& m : ms) {
    const std::string p = "method." + m.method + ".";
    out << p << "mean_cosine=" << format_real(m.mean_cosine) << '\n';
    out << p << "min_cosine=" << format_real(m.min_cosine) << '\n';
    out << p << "max_abs_err=" << format_real(m.max_abs_err) << '\n';
    out << p << "rel_frob=" << format_real(m.rel_frob) << '\n';
    out << p << "key_mse=" << format_real(m.key_mse) << '\n';
    out << p << "effective_bits=" << format_real(m.memory.effective_bits_per_element) << '\n';
    out << p << "compression_ratio=" << format_real(m.memory.compression_ratio_vs_fp16) << '\n';
  }
}

/// Reads key=value lines (blank lines and '#' comments ignored).
inline std::map<std::string, std::string> parse_summary(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kFormat, "summary line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace akvq
