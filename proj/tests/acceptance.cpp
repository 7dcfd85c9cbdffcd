// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
#include <akvq/kvcache.hpp>
#include <akvq/pipeline.hpp>
#include <akvq/quantizer.hpp>
#include <akvq/saliency.hpp>
#include <akvq/tensor.hpp>
#include <akvq/wht.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace akvq;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

// 1. Exact mode with WHT on reproduces unquantized attention.
void criterion_wht_exactness(Outcome& o) {
  const auto t0 = Clock::now();
  SimConfig cfg = paper_default_config(1);
  cfg.cache.n_layers = 2;
  cfg.cache.n_heads = 4;
  cfg.cache.n_kv_heads = 4;
  cfg.seq_len_prefill = 192;
  cfg.decode_steps = 64;
  const auto m = run_methods(cfg, {"exact-wht"}).front();
  const double dt = seconds_since(t0);
  o.detail << "max_abs_err=" << m.max_abs_err << " time=" << dt << "s";
  o.check(m.max_abs_err <= 1e-4, "max_abs_err above 1e-4");
  o.check(dt < 5.0, "took longer than 5 s");
}

// 2. Hadamard orthonormality and FWHT agreement with the dense matrix.
void criterion_hadamard(Outcome& o) {
  double worst_orth = 0.0, worst_fwht = 0.0;
  Rng rng(2);
  for (std::size_t d = 2; d <= 512; d *= 2) {
    const Tensor h = hadamard_matrix(HadamardDim::from_dim(d));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(h.at(i, k)) * h.at(j, k);
        worst_orth = std::max(worst_orth, std::fabs(dot - (i == j ? 1.0 : 0.0)));
      }
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<float> v(d);
      fill_random(v, rng, Gaussian{0, 1});
      std::vector<double> dense(d, 0.0);
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) dense[j] += static_cast<double>(v[i]) * h.at(i, j);
      fwht_inplace(v);
      for (std::size_t j = 0; j < d; ++j) worst_fwht = std::max(worst_fwht, std::fabs(v[j] - dense[j]));
    }
  }
  const Tensor h2 = hadamard_matrix(HadamardDim::from_dim(2));
  const float s = static_cast<float>(1.0 / std::sqrt(2.0));
  o.detail << "orth_err=" << worst_orth << " fwht_err=" << worst_fwht;
  o.check(worst_orth <= 1e-6, "H H^T differs from I");
  o.check(worst_fwht <= 1e-5, "FWHT differs from matrix product");
  o.check(h2.at(0, 0) == s && h2.at(0, 1) == s && h2.at(1, 0) == s && h2.at(1, 1) == -s, "H_2 entries");
}

// Nearest representable level by exhaustive search; exact ties go to the
// candidate whose unclamped level (q - zero) is even.
std::uint8_t brute_force_code(float x, float scale, std::int32_t zero, std::uint32_t max_code) {
  std::uint32_t best = 0;
  double best_d = INFINITY;
  for (std::uint32_t q = 0; q <= max_code; ++q) {
    const std::int64_t level = static_cast<std::int64_t>(q) - zero;
    const double d = std::fabs(static_cast<double>(x) - static_cast<double>(scale) * static_cast<double>(level));
    if (d < best_d || (d == best_d && level % 2 == 0)) {
      best = q;
      best_d = d;
    }
  }
  return static_cast<std::uint8_t>(best);
}

// 3. Quantizer codes and reconstruction error.
void criterion_quantizer(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(3);
  std::size_t groups = 0, mismatches = 0, bound_violations = 0;
  for (int bits : {2, 4})
    for (float clip : {0.8f, 1.0f}) {
      QuantParams p;
      p.bits = bits;
      p.clip_ratio = clip;
      p.group_size = 128;
      for (int g = 0; g < 1000; ++g) {
        std::vector<float> x(128);
        fill_random(x, rng, Gaussian{0, 1});
        const auto q = quantize_group(x, p);
        const auto codes = unpack_codes(q.packed, q.count, bits);
        const auto rec = dequantize_group(q);
        const auto [cmin, cmax] = clipped_range(x, clip);
        ++groups;
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (codes[i] != brute_force_code(x[i], q.scale, q.zero, p.max_code())) ++mismatches;
          if (x[i] >= cmin && x[i] <= cmax && std::fabs(rec[i] - x[i]) > q.scale / 2.0 + 1e-6) ++bound_violations;
        }
      }
    }
  const double dt = seconds_since(t0);
  o.detail << "groups=" << groups << " code_mismatches=" << mismatches << " bound_violations=" << bound_violations
           << " time=" << dt << "s";
  o.check(mismatches == 0, "codes differ from brute force");
  o.check(bound_violations == 0, "error above scale/2");
  o.check(dt < 10.0, "took longer than 10 s");
}

// 4. Outlier ratio under the transform.
void criterion_outliers(Outcome& o) {
  Tensor onehot({8, 128});
  for (std::size_t r = 0; r < 8; ++r) onehot.at(r, r * 13) = 7.0f;
  const double one = outlier_ratio(fwht_rows(onehot));
  std::size_t improved = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tensor k = gen_random({64, 128}, seed, Gaussian{0, 1});
    for (std::size_t t = 0; t < 64; ++t)
      for (std::size_t c : {17u, 90u}) k.at(t, c) *= 20.0f;
    if (outlier_ratio(fwht_rows(k)) < outlier_ratio(k)) ++improved;
  }
  o.detail << "onehot_ratio=" << one << " improved=" << improved << "/100";
  o.check(std::fabs(one - 1.0) <= 1e-6, "one-hot ratio not 1");
  o.check(improved == 100, "hot channels not reduced in every seed");
}

// 5. Pivot recovery from injected massive activations.
void criterion_pivots(Outcome& o) {
  std::size_t true_pos = 0, false_pos = 0, missed = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Tensor r = gen_random({512, 256}, seed + 1000, Gaussian{0, 1});
    const std::size_t n_inject = 1 + seed % 5;
    std::set<std::size_t> injected;
    std::uniform_int_distribution<std::size_t> pick(0, 511);
    while (injected.size() < n_inject) injected.insert(pick(rng));
    for (std::size_t t : injected)
      for (std::size_t c = 0; c < 256; ++c) r.at(t, c) *= 500.0f;
    for (std::size_t t : detect_pivot_tokens(r)) (injected.count(t) ? true_pos : false_pos) += 1;
    missed += injected.size();
  }
  missed -= true_pos;
  const auto flat = detect_pivot_tokens(Tensor({32, 16}, std::vector<float>(512, 1.0f)));
  o.detail << "true_pos=" << true_pos << " false_pos=" << false_pos << " missed=" << missed;
  o.check(false_pos == 0 && missed == 0, "precision or recall below 100%");
  o.check(flat == std::vector<std::size_t>{0}, "flat input did not return [0]");
}

// 6. Method comparison over seeds.
void criterion_methods(Outcome& o) {
  const std::vector<std::string> methods = {"rtn-int2", "rtn-int2-wht", "akvq-tsa", "akvq"};
  std::vector<double> sum(methods.size(), 0.0);
  std::size_t wins = 0;
  const std::size_t seeds = 100;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const auto ms = run_methods(paper_default_config(seed), methods);
    for (std::size_t i = 0; i < ms.size(); ++i) sum[i] += ms[i].mean_cosine;
    if (ms[3].mean_cosine > ms[0].mean_cosine) ++wins;
  }
  bool ordered = true;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    o.detail << methods[i] << "=" << sum[i] / seeds << " ";
    if (i > 0 && !(sum[i] > sum[i - 1])) ordered = false;
  }
  o.detail << "wins=" << wins << "/" << seeds;
  o.check(wins >= 95, "akvq beat rtn-int2 in fewer than 95 runs");
  o.check(ordered, "mean cosine not ordered");
}

CacheConfig one_layer(std::size_t hd = 128) {
  CacheConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.n_kv_heads = 1;
  c.head_dim = hd;
  c.group_size = hd;
  return c;
}

// 7. Memory accounting.
void criterion_memory(Outcome& o) {
  LayerPolicy uniform;
  uniform.uniform_tier = Tier::kInt2;
  MixedPrecisionKVCache pure(one_layer(), {uniform});
  const Tensor k10 = gen_random({1, 1, 10, 128}, 1, Gaussian{0, 1});
  pure.prefill(k10, k10, std::vector<Modality>(10, Modality::kVision));
  const auto rp = pure.memory_report();

  auto psa = make_policies(1, {}, {0}, 128, 15);
  MixedPrecisionKVCache mixed(one_layer(), psa);
  const Tensor k300 = gen_random({1, 1, 300, 128}, 2, Gaussian{0, 1});
  mixed.prefill(k300, k300, std::vector<Modality>(300, Modality::kVision));
  const double expect = (129.0 * 16.0 + 171.0 * 2.5) / 300.0;
  const double got = mixed.memory_report().effective_bits_per_element;

  MixedPrecisionKVCache big(one_layer(), psa);
  const Tensor k1e5 = gen_random({1, 1, 100000, 128}, 3, Gaussian{0, 1});
  big.prefill(k1e5, k1e5, std::vector<Modality>(100000, Modality::kVision));
  const double asym = big.memory_report().effective_bits_per_element;

  o.detail << "pure_bits=" << rp.effective_bits_per_element << " ratio=" << rp.compression_ratio_vs_fp16
           << " mixed_bits=" << got << " asymptotic_bits=" << asym;
  o.check(rp.effective_bits_per_element == 2.5 && rp.compression_ratio_vs_fp16 == 6.4, "pure int2 accounting");
  o.check(std::fabs(got - expect) <= 1e-9, "300-token accounting");
  o.check(std::fabs(asym - 2.5) <= 0.05, "asymptotic bits not near 2.5");
}

// 8. Randomized cache operation sequences.
void criterion_cache_properties(Outcome& o) {
  Rng rng(8);
  std::uniform_int_distribution<std::size_t> len(1, 80), win(0, 24), split(0, 80);
  std::bernoulli_distribution coin(0.5);
  std::size_t ops = 0, partition_bad = 0, equivalence_bad = 0, view_bad = 0, invariant_bad = 0;
  const std::size_t L = 2, KVH = 2, hd = 16;
  int trial = 0;
  for (; ops < 10000; ++trial) {
    const std::size_t n = len(rng);
    CacheConfig cfg = one_layer(hd);
    cfg.n_layers = L;
    cfg.n_heads = 2 * KVH;
    cfg.n_kv_heads = KVH;
    cfg.group_size = 8;
    cfg.wht_enabled = coin(rng);
    std::uniform_int_distribution<std::size_t> piv(0, n - 1);
    std::vector<std::size_t> pivots{piv(rng), piv(rng), 0};
    auto ps = make_policies(L, {0}, pivots, win(rng), 2);
    ps[1].recent_window = win(rng);
    ps[1].protect_text_in_psa = coin(rng);
    std::vector<Modality> m(n);
    for (auto& x : m) x = coin(rng) ? Modality::kText : Modality::kVision;
    Tensor k({L, KVH, n, hd}), v({L, KVH, n, hd});
    fill_random(k.data(), rng, Gaussian{0, 2});
    fill_random(v.data(), rng, Gaussian{0, 2});

    MixedPrecisionKVCache bulk(cfg, ps);
    bulk.prefill(k, v, m);
    ++ops;
    MixedPrecisionKVCache stepwise(cfg, ps);
    const std::size_t p = std::min(split(rng), n);
    if (p > 0) {
      Tensor pk({L, KVH, p, hd}), pv({L, KVH, p, hd});
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < KVH; ++h)
          for (std::size_t t = 0; t < p; ++t)
            for (std::size_t c = 0; c < hd; ++c) {
              pk.data()[pk.offset({l, h, t, c})] = k.data()[k.offset({l, h, t, c})];
              pv.data()[pv.offset({l, h, t, c})] = v.data()[v.offset({l, h, t, c})];
            }
      stepwise.prefill(pk, pv, std::vector<Modality>(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(p)));
      ++ops;
    }
    for (std::size_t t = p; t < n; ++t) {
      Tensor kr({L, KVH, hd}), vr({L, KVH, hd});
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < KVH; ++h)
          for (std::size_t c = 0; c < hd; ++c) {
            kr.data()[kr.offset({l, h, c})] = k.data()[k.offset({l, h, t, c})];
            vr.data()[vr.offset({l, h, c})] = v.data()[v.offset({l, h, t, c})];
          }
      stepwise.append_decode(kr, vr, m[t]);
      ++ops;
      try {
        stepwise.check_invariants();
      } catch (const std::exception&) {
        ++invariant_bad;
      }
    }
    if (!(stepwise == bulk)) ++equivalence_bad;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < KVH; ++h) {
        std::vector<int> seen(n, 0);
        for (Tier r : {Tier::kFp16, Tier::kInt4, Tier::kInt2})
          for (std::size_t t : bulk.region_indices(l, h, r)) seen[t] += 1;
        for (int s : seen)
          if (s != 1) ++partition_bad;
        if (bulk.tiers(l) != classify_tokens(n, m, ps[l])) ++partition_bad;
        if (!(bulk.dequantized_view(l, h) == bulk.dequantized_view(l, h))) ++view_bad;
        if (!(bulk.dequantized_view(l, h) == stepwise.dequantized_view(l, h))) ++view_bad;
        ops += 2;
      }
  }
  o.detail << "sequences=" << trial << " operations=" << ops << " partition_bad=" << partition_bad
           << " equivalence_bad=" << equivalence_bad << " view_bad=" << view_bad << " invariant_bad=" << invariant_bad;
  o.check(partition_bad == 0 && invariant_bad == 0, "region partition");
  o.check(equivalence_bad == 0, "prefill/append equivalence");
  o.check(view_bad == 0, "dequantized view not deterministic");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"WHT exactness with quantization off", criterion_wht_exactness},
      {"Hadamard orthonormality and FWHT", criterion_hadamard},
      {"quantizer codes and error bound", criterion_quantizer},
      {"outlier ratio under WHT", criterion_outliers},
      {"pivot token recovery", criterion_pivots},
      {"method comparison over 100 seeds", criterion_methods},
      {"memory accounting", criterion_memory},
      {"cache invariants under random operations", criterion_cache_properties},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << ": " << criteria[i].first << " ("
              << o.detail.str() << ")" << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
