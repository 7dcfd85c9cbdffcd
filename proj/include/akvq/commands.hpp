#pragma once

// Command implementations behind the akvq executable. Each takes a plain
// options struct, writes its human-readable report to `out`, and returns the
// numbers it printed so callers (and tests) need not parse text.

#include <akvq/error.hpp>
#include <akvq/kvcache.hpp>
#include <akvq/pipeline.hpp>
#include <akvq/quantizer.hpp>
#include <akvq/saliency.hpp>
#include <akvq/tensor.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace akvq {

// ---------------------------------------------------------------------------
// quantize

struct QuantizeOptions {
  std::filesystem::path input;
  std::filesystem::path output;  // empty: do not write the reconstruction
  int bits = 2;
  std::optional<float> clip_ratio;  // unset: 0.8 for 2 bits, 1.0 for 4 bits
  std::size_t group_size = kDefaultGroupSize;
};

struct QuantizeReport {
  std::vector<double> token_max_err;
  double mse = 0.0;
  double effective_bits = 0.0;
};

inline float default_clip(int bits) { return bits == 2 ? 0.8f : 1.0f; }

inline QuantizeReport quantize_tensor(const Tensor& input, const QuantParams& p, Tensor* reconstructed = nullptr) {
  p.validate();
  require(input.ndim() == 2, ErrorKind::kShape, "quantize expects a 2-D tokens x channels tensor");
  QuantizeReport rep;
  Tensor recon(input.shape());
  std::size_t bytes = 0;
  double sq = 0.0;
  for (std::size_t t = 0; t < input.rows(); ++t) {
    const auto row = input.row(t);
    const QuantizedRow q = quantize_row(row, p);
    bytes += code_bytes(q) + overhead_bytes(q);
    auto out = recon.row(t);
    dequantize_row_into(q, out);
    double mx = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double d = static_cast<double>(out[c]) - row[c];
      mx = std::max(mx, std::fabs(d));
      sq += d * d;
    }
    rep.token_max_err.push_back(mx);
  }
  if (input.size() > 0) {
    rep.mse = sq / static_cast<double>(input.size());
    rep.effective_bits = 8.0 * static_cast<double>(bytes) / static_cast<double>(input.size());
  }
  if (reconstructed) *reconstructed = std::move(recon);
  return rep;
}

inline QuantizeReport cmd_quantize(const QuantizeOptions& opt, std::ostream& out) {
  QuantParams p;
  p.bits = opt.bits;
  p.clip_ratio = opt.clip_ratio.value_or(default_clip(opt.bits));
  p.group_size = opt.group_size;
  p.validate();
  const Tensor input = load_tensor(opt.input);
  Tensor recon;
  const QuantizeReport rep = quantize_tensor(input, p, &recon);
  if (!opt.output.empty()) save_tensor(recon, opt.output);

  out << "input " << opt.input.string() << " (" << input.rows() << " tokens x " << input.cols() << " channels)\n";
  out << "bits " << p.bits << "  clip " << format_real(p.clip_ratio) << "  group " << p.group_size << "\n";
  out << "token max_abs_err\n";
  for (std::size_t t = 0; t < rep.token_max_err.size(); ++t) out << t << ' ' << format_real(rep.token_max_err[t]) << '\n';
  out << "mse=" << format_real(rep.mse) << '\n';
  out << "effective_bits=" << format_real(rep.effective_bits) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// analyze-attention

struct AnalyzeOptions {
  std::filesystem::path attention;  // layers x heads x queries x keys
  std::filesystem::path labels;
  double gamma = kDefaultGamma;
  std::size_t excluded_prefix = kDefaultExcludedPrefix;
  std::size_t bin = 0;  // > 0: also print attention received per bin of keys
  std::filesystem::path policy_out;
};

struct AnalyzeReport {
  std::vector<ModalityAttentionStats> stats;
  TsaDetection detection;
};

inline AnalyzeReport cmd_analyze_attention(const AnalyzeOptions& opt, std::ostream& out) {
  const Tensor attn = load_tensor(opt.attention);
  const auto labels = load_modality_labels(opt.labels);
  require(attn.ndim() == 4, ErrorKind::kInput, "attention dump must be layers x heads x queries x keys");
  const std::size_t L = attn.dim(0);
  const std::size_t heads = attn.dim(1);
  const std::size_t queries = attn.dim(2);
  const std::size_t keys = attn.dim(3);
  require(labels.size() == keys, ErrorKind::kInput,
          "got " + std::to_string(labels.size()) + " modality labels for " + std::to_string(keys) + " keys");

  AnalyzeReport rep;
  const std::size_t per_layer = heads * queries * keys;
  for (std::size_t l = 0; l < L; ++l) {
    const auto src = attn.data().subspan(l * per_layer, per_layer);
    Tensor layer({heads, queries, keys}, std::vector<float>(src.begin(), src.end()));
    rep.stats.push_back(modality_attention_stats(layer, labels, opt.excluded_prefix));
  }
  rep.detection = detect_tsa_layers(rep.stats, opt.gamma);

  auto fmt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("n/a"); };
  out << "layer head text_mean vision_mean\n";
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < heads; ++h)
      out << l << ' ' << h << ' ' << fmt(rep.stats[l].text_mean[h]) << ' ' << fmt(rep.stats[l].vision_mean[h]) << '\n';
  out << "layer pattern\n";
  std::set<std::size_t> skipped(rep.detection.skipped.begin(), rep.detection.skipped.end());
  for (std::size_t l = 0; l < L; ++l)
    out << l << ' ' << (skipped.count(l) ? "skipped" : (rep.detection.tsa_layers.count(l) ? "TSA" : "PSA")) << '\n';
  out << "tsa_layers=";
  bool first = true;
  for (std::size_t l : rep.detection.tsa_layers) out << (std::exchange(first, false) ? "" : ",") << l;
  out << '\n';
  if (!rep.detection.skipped.empty())
    out << "warning: " << rep.detection.skipped.size() << " layer(s) lack text or vision keys and were left PSA\n";

  if (opt.bin > 0) {
    out << "layer bin_start mean_attention\n";
    for (std::size_t l = 0; l < L; ++l) {
      const auto src = attn.data().subspan(l * per_layer, per_layer);
      for (std::size_t b = 0; b < keys; b += opt.bin) {
        const std::size_t e = std::min(keys, b + opt.bin);
        double sum = 0.0;
        for (std::size_t hq = 0; hq < heads * queries; ++hq)
          for (std::size_t k = b; k < e; ++k) sum += src[hq * keys + k];
        out << l << ' ' << b << ' ' << format_real(sum / static_cast<double>(heads * queries * (e - b))) << '\n';
      }
    }
  }

  if (!opt.policy_out.empty()) {
    PolicyFile pf;
    pf.n_layers = L;
    pf.gamma = opt.gamma;
    pf.patterns.assign(L, AttentionPattern::kPsa);
    for (std::size_t l : rep.detection.tsa_layers) pf.patterns[l] = AttentionPattern::kTsa;
    save_policy(pf, opt.policy_out);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// detect-pivots

struct PivotOptions {
  std::filesystem::path residual;  // tokens x hidden
  double tau = kDefaultTau;
  std::size_t n_pivot_max = kDefaultPivotMax;
};

struct PivotReport {
  std::vector<std::size_t> pivots;
  std::vector<double> scores;  // aligned with pivots
  double median_score = 0.0;
};

inline PivotReport cmd_detect_pivots(const PivotOptions& opt, std::ostream& out) {
  const Tensor residual = load_tensor(opt.residual);
  PivotReport rep;
  rep.pivots = detect_pivot_tokens(residual, opt.tau, opt.n_pivot_max);
  const auto score = token_scores(residual);
  rep.median_score = median(score);
  for (std::size_t p : rep.pivots) rep.scores.push_back(score[p]);

  out << "median_score=" << format_real(rep.median_score) << '\n';
  out << "threshold=" << format_real(opt.tau * rep.median_score) << '\n';
  out << "pivots: [";
  for (std::size_t i = 0; i < rep.pivots.size(); ++i) out << (i ? ", " : "") << rep.pivots[i];
  out << "]\n";
  out << "token score\n";
  for (std::size_t i = 0; i < rep.pivots.size(); ++i) out << rep.pivots[i] << ' ' << format_real(rep.scores[i]) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// simulate

inline const std::vector<std::string>& default_sim_methods() {
  static const std::vector<std::string> m = {"akvq", "fp16", "rtn-int4", "rtn-int2", "akvq-no-wht"};
  return m;
}

struct SimulateOptions {
  SimConfig config = paper_default_config();
  std::vector<std::string> methods = default_sim_methods();
  std::filesystem::path summary;  // key=value file
  std::filesystem::path records;  // per (method, layer, step) lines
};

inline std::vector<SimMetrics> cmd_simulate(const SimulateOptions& opt, std::ostream& out) {
  require(!opt.methods.empty(), ErrorKind::kParameter, "no methods requested");
  opt.config.validate();
  const auto metrics = run_methods(opt.config, opt.methods);

  out << "seed " << opt.config.seed << ": " << opt.config.cache.n_layers << " layers, " << opt.config.seq_len_prefill
      << " prefill + " << opt.config.decode_steps << " decode tokens\n";
  out << "pivots:";
  for (std::size_t p : metrics.front().pivots) out << ' ' << p;
  out << '\n';
  out << std::left << std::setw(14) << "method" << std::right << std::setw(12) << "mean_cos" << std::setw(12)
      << "min_cos" << std::setw(12) << "rel_frob" << std::setw(12) << "key_mse" << std::setw(8) << "bits" << std::setw(8)
      << "ratio" << '\n';
  for (const auto& m : metrics) {
    out << std::left << std::setw(14) << m.method << std::right << std::fixed << std::setprecision(6) << std::setw(12)
        << m.mean_cosine << std::setw(12) << m.min_cosine << std::setw(12) << m.rel_frob << std::setw(12) << m.key_mse
        << std::setprecision(3) << std::setw(8) << m.memory.effective_bits_per_element << std::setw(8)
        << m.memory.compression_ratio_vs_fp16 << '\n';
    out.unsetf(std::ios::floatfield);
  }

  if (!opt.summary.empty()) {
    std::ofstream f(opt.summary);
    require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + opt.summary.string() + " for writing");
    write_summary(f, opt.config, metrics);
  }
  if (!opt.records.empty()) {
    std::ofstream f(opt.records);
    require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + opt.records.string() + " for writing");
    f << "# method layer step cosine max_err rel_frob\n";
    for (const auto& m : metrics) write_records(f, m);
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
  std::vector<std::filesystem::path> summaries;
  std::string method = "akvq";
  std::string baseline = "rtn-int2";
};

struct MethodAggregate {
  std::string method;
  std::size_t runs = 0;
  double mean_cosine = 0.0;
  double min_cosine = 1.0;
  double rel_frob = 0.0;
  double key_mse = 0.0;
  double effective_bits = 0.0;
  double compression_ratio = 0.0;
};

struct ReportSummary {
  std::vector<MethodAggregate> methods;  // first-seen order
  std::size_t paired_runs = 0;           // runs holding both method and baseline
  std::size_t wins = 0;                  // method mean_cosine > baseline mean_cosine
};

inline ReportSummary cmd_report(const ReportOptions& opt, std::ostream& out) {
  require(!opt.summaries.empty(), ErrorKind::kParameter, "no summary files given");
  ReportSummary rep;
  auto agg = [&](const std::string& name) -> MethodAggregate& {
    for (auto& a : rep.methods)
      if (a.method == name) return a;
    rep.methods.push_back({name});
    rep.methods.back().min_cosine = 1.0;
    return rep.methods.back();
  };
  auto number = [](const std::map<std::string, std::string>& kv, const std::string& key,
                   const std::filesystem::path& file) {
    const auto it = kv.find(key);
    require(it != kv.end(), ErrorKind::kFormat, file.string() + ": missing " + key);
    return detail::parse_real(it->second, key);
  };

  for (const auto& path : opt.summaries) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
    const auto kv = parse_summary(in);
    const auto it = kv.find("methods");
    require(it != kv.end(), ErrorKind::kFormat, path.string() + ": missing methods");
    std::map<std::string, double> cos;
    std::stringstream ss(it->second);
    std::string name;
    while (std::getline(ss, name, ',')) {
      const std::string p = "method." + name + ".";
      MethodAggregate& a = agg(name);
      const double c = number(kv, p + "mean_cosine", path);
      cos[name] = c;
      a.runs += 1;
      a.mean_cosine += c;
      a.min_cosine = std::min(a.min_cosine, number(kv, p + "min_cosine", path));
      a.rel_frob += number(kv, p + "rel_frob", path);
      a.key_mse += number(kv, p + "key_mse", path);
      a.effective_bits += number(kv, p + "effective_bits", path);
      a.compression_ratio += number(kv, p + "compression_ratio", path);
    }
    if (cos.count(opt.method) && cos.count(opt.baseline)) {
      rep.paired_runs += 1;
      if (cos[opt.method] > cos[opt.baseline]) rep.wins += 1;
    }
  }
  for (auto& a : rep.methods) {
    const auto n = static_cast<double>(a.runs);
    a.mean_cosine /= n;
    a.rel_frob /= n;
    a.key_mse /= n;
    a.effective_bits /= n;
    a.compression_ratio /= n;
  }

  out << opt.summaries.size() << " summary file(s)\n";
  out << "method runs mean_cosine min_cosine rel_frob key_mse effective_bits compression_ratio\n";
  for (const auto& a : rep.methods)
    out << a.method << ' ' << a.runs << ' ' << format_real(a.mean_cosine) << ' ' << format_real(a.min_cosine) << ' '
        << format_real(a.rel_frob) << ' ' << format_real(a.key_mse) << ' ' << format_real(a.effective_bits) << ' '
        << format_real(a.compression_ratio) << '\n';
  if (rep.paired_runs > 0)
    out << opt.method << " > " << opt.baseline << " in " << rep.wins << "/" << rep.paired_runs << " runs\n";
  return rep;
}

}  // namespace akvq
