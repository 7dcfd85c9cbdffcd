// akvq: command-line front end for the mixed-precision KV-cache library.

#include <akvq/commands.hpp>

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>

namespace {

using akvq::SimConfig;

// A simulate flag bound into a SimConfig. After parsing, flags the user did
// not pass are taken from the chosen preset.
using PresetFill = std::function<void(const SimConfig&)>;

template <class T, class Get>
CLI::Option* sim_flag(CLI::App& app, std::vector<PresetFill>& fills, const std::string& name, T& field, Get get,
                      const std::string& help) {
  CLI::Option* opt = app.add_option(name, field, help)->capture_default_str();
  fills.push_back([opt, &field, get](const SimConfig& base) {
    if (opt->count() == 0) field = get(base);
  });
  return opt;
}

SimConfig small_config(std::uint64_t seed) {
  SimConfig cfg = akvq::paper_default_config(seed);
  cfg.cache.n_layers = 4;
  cfg.cache.head_dim = 64;
  cfg.cache.group_size = 64;
  cfg.cache.recent_window = 16;
  cfg.seq_len_prefill = 96;
  cfg.decode_steps = 8;
  cfg.shape.vision_start = 4;
  cfg.tsa_layers = {0};
  return cfg;
}

SimConfig preset_config(const std::string& name, std::uint64_t seed) {
  if (name == "paper-defaults") return akvq::paper_default_config(seed);
  if (name == "small") return small_config(seed);
  akvq::fail(akvq::ErrorKind::kParameter, "unknown preset '" + name + "'");
}

std::set<std::size_t> parse_layer_list(const std::string& text) {
  std::set<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = akvq::detail::trim(item);
    if (!item.empty()) out.insert(akvq::detail::parse_size(item, "--tsa-layers"));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-aware mixed-precision (16/4/2-bit) KV-cache quantization with Walsh-Hadamard rotation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.footer(
      "Defaults marked [reference] reproduce the published evaluation setting: group 128, clip 0.8 (int2) / 1.0 "
      "(int4), recent window 128, 15 pivot tokens, TSA layers {0,1} of 32. Defaults marked [sim] are choices of "
      "this simulator.");

  // quantize -----------------------------------------------------------------
  akvq::QuantizeOptions qopt;
  float qclip = 0.0f;
  auto* quantize = app.add_subcommand("quantize", "Quantize a tokens x channels AKV1 tensor and report the error");
  quantize->add_option("input", qopt.input, "Input AKV1 tensor (tokens x channels)")->required();
  quantize->add_option("-o,--output", qopt.output, "Write the dequantized reconstruction here (AKV1) [optional: not written]");
  quantize->add_option("--bits", qopt.bits, "Code width, 2 or 4 [reference: 2-bit default tier]")
      ->capture_default_str()
      ->check(CLI::IsMember({2, 4}));
  auto* qclip_opt = quantize->add_option(
      "--clip", qclip, "Clip ratio in (0, 1] [reference: 0.8 for 2 bits, 1.0 for 4 bits when omitted]");
  quantize->add_option("--group-size", qopt.group_size, "Channels per quantization group [reference: 128]")
      ->capture_default_str();

  // analyze-attention --------------------------------------------------------
  akvq::AnalyzeOptions aopt;
  auto* analyze = app.add_subcommand("analyze-attention", "Split layers into TSA / PSA from an attention dump");
  analyze->add_option("attention", aopt.attention, "AKV1 attention weights (layers x heads x queries x keys)")
      ->required();
  analyze->add_option("labels", aopt.labels, "Modality label file: one text|vision (or t|v) per key token")
      ->required();
  analyze->add_option("--gamma", aopt.gamma, "TSA when mean text attention > gamma x mean vision attention [sim]")
      ->capture_default_str();
  analyze->add_option("--excluded-prefix", aopt.excluded_prefix,
                      "Leading sink tokens dropped from the statistics [sim]")
      ->capture_default_str();
  analyze->add_option("--bin", aopt.bin, "Also print mean attention per bin of this many keys; 0 = off [reference: 8]")
      ->capture_default_str();
  analyze->add_option("--policy-out", aopt.policy_out, "Write the detected layer split as a policy file [optional: not written]");

  // detect-pivots ------------------------------------------------------------
  akvq::PivotOptions popt;
  auto* pivots = app.add_subcommand("detect-pivots", "Find pivot tokens from massive residual activations");
  pivots->add_option("residual", popt.residual, "AKV1 residual dump (tokens x hidden)")->required();
  pivots->add_option("--tau", popt.tau, "Pivot when max |activation| > tau x median token score [sim]")
      ->capture_default_str();
  pivots->add_option("--n-pivot-max", popt.n_pivot_max, "Keep at most this many pivots [reference: 15]")
      ->capture_default_str();

  // simulate -----------------------------------------------------------------
  akvq::SimulateOptions sopt;
  SimConfig& cfg = sopt.config;
  std::vector<PresetFill> fills;
  std::string preset = "paper-defaults";
  std::string model;
  std::string tsa_text;
  std::filesystem::path policy_path;
  std::string methods_text;
  auto* simulate = app.add_subcommand("simulate", "Run prefill + decode through each method and compare attention");
  simulate->add_option("--preset", preset, "Base configuration: paper-defaults | small [paper-defaults = reference]")
      ->capture_default_str();
  simulate->add_option("--seed", cfg.seed, "RNG seed for the synthetic stream [sim]")->capture_default_str();
  sim_flag(*simulate, fills, "--layers", cfg.cache.n_layers, [](const SimConfig& b) { return b.cache.n_layers; },
           "Decoder layers [reference: 32]");
  sim_flag(*simulate, fills, "--heads", cfg.cache.n_heads, [](const SimConfig& b) { return b.cache.n_heads; },
           "Query heads [sim: 2, desk scale]");
  sim_flag(*simulate, fills, "--kv-heads", cfg.cache.n_kv_heads, [](const SimConfig& b) { return b.cache.n_kv_heads; },
           "KV heads; query head h reads KV head h / (heads / kv_heads) [sim: 1]");
  sim_flag(*simulate, fills, "--head-dim", cfg.cache.head_dim, [](const SimConfig& b) { return b.cache.head_dim; },
           "Channels per head, a power of two when WHT is on [reference: 128]");
  sim_flag(*simulate, fills, "--group-size", cfg.cache.group_size,
           [](const SimConfig& b) { return b.cache.group_size; }, "Channels per quantization group [reference: 128]");
  sim_flag(*simulate, fills, "--clip-int2", cfg.cache.clip_int2, [](const SimConfig& b) { return b.cache.clip_int2; },
           "Clip ratio for 2-bit rows [reference: 0.8]");
  sim_flag(*simulate, fills, "--clip-int4", cfg.cache.clip_int4, [](const SimConfig& b) { return b.cache.clip_int4; },
           "Clip ratio for 4-bit rows [reference: 1.0]");
  sim_flag(*simulate, fills, "--recent-window", cfg.cache.recent_window,
           [](const SimConfig& b) { return b.cache.recent_window; },
           "Trailing tokens kept at fp16 [reference: 128]");
  sim_flag(*simulate, fills, "--n-pivot-max", cfg.cache.n_pivot_max,
           [](const SimConfig& b) { return b.cache.n_pivot_max; }, "Pivot tokens kept at fp16 [reference: 15]");
  sim_flag(*simulate, fills, "--prefill", cfg.seq_len_prefill, [](const SimConfig& b) { return b.seq_len_prefill; },
           "Prompt tokens [sim: 512]");
  sim_flag(*simulate, fills, "--decode-steps", cfg.decode_steps, [](const SimConfig& b) { return b.decode_steps; },
           "Generated tokens compared against the baseline [sim: 64]");
  sim_flag(*simulate, fills, "--rope-base", cfg.rope_base, [](const SimConfig& b) { return b.rope_base; },
           "RoPE frequency base [reference model: 10000]");
  sim_flag(*simulate, fills, "--tau", cfg.tau, [](const SimConfig& b) { return b.tau; },
           "Pivot threshold multiple of the median token score [sim: 50]");
  sim_flag(*simulate, fills, "--vision-fraction", cfg.shape.vision_fraction,
           [](const SimConfig& b) { return b.shape.vision_fraction; }, "Share of prefill tokens that are vision [sim]");
  sim_flag(*simulate, fills, "--hot-channels", cfg.shape.hot_channels,
           [](const SimConfig& b) { return b.shape.hot_channels; }, "Outlier Key channels per head [sim: 2]");
  sim_flag(*simulate, fills, "--hot-multiplier", cfg.shape.hot_multiplier,
           [](const SimConfig& b) { return b.shape.hot_multiplier; }, "Magnitude of outlier Key channels [sim: 20x]");
  sim_flag(*simulate, fills, "--injected-pivots", cfg.shape.injected_pivots,
           [](const SimConfig& b) { return b.shape.injected_pivots; },
           "Massive-activation vision tokens besides token 0 [sim: 3]");
  sim_flag(*simulate, fills, "--massive-magnitude", cfg.shape.massive_magnitude,
           [](const SimConfig& b) { return b.shape.massive_magnitude; },
           "Residual magnitude at injected pivots [sim: 1000]");
  simulate->add_flag("--protect-text-in-psa", cfg.protect_text_in_psa,
                     "Keep text tokens at int4 in PSA layers [sim: off]");
  simulate->add_option("--tsa-layers", tsa_text, "Comma-separated TSA layers [reference: 0,1]");
  simulate->add_option("--model", model, "Take TSA layers from the observed split of a known model [optional: preset layers]")
      ->check(CLI::IsMember([] {
        std::vector<std::string> names;
        for (const auto& e : akvq::kModelPatterns) names.push_back(e.model);
        return names;
      }()));
  simulate->add_option("--policy", policy_path,
                       "Policy file (analyze-attention --policy-out); supplies TSA layers, window, pivot cap, tau [optional]");
  simulate->add_option("--methods", methods_text,
                       "Comma-separated methods: fp16, exact-wht, rtn-int4, rtn-int2, rtn-int2-wht, akvq-tsa, akvq, "
                       "akvq-no-wht [default: akvq,fp16,rtn-int4,rtn-int2,akvq-no-wht]");
  simulate->add_option("--summary", sopt.summary, "Write key=value summary here [optional: not written]");
  simulate->add_option("--records", sopt.records, "Write per-(method, layer, step) metrics here [optional: not written]");

  // report -------------------------------------------------------------------
  akvq::ReportOptions ropt;
  auto* report = app.add_subcommand("report", "Aggregate simulate summary files (e.g. one per seed)");
  report->add_option("summaries", ropt.summaries, "Summary files written by simulate --summary")->required();
  report->add_option("--method", ropt.method, "Method counted for wins [sim]")->capture_default_str();
  report->add_option("--baseline", ropt.baseline, "Baseline counted for wins [sim]")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*quantize) {
      if (qclip_opt->count() > 0) qopt.clip_ratio = qclip;
      akvq::cmd_quantize(qopt, std::cout);
    } else if (*analyze) {
      akvq::cmd_analyze_attention(aopt, std::cout);
    } else if (*pivots) {
      akvq::cmd_detect_pivots(popt, std::cout);
    } else if (*simulate) {
      const SimConfig base = preset_config(preset, cfg.seed);
      for (const auto& fill : fills) fill(base);
      cfg.shape.vision_start = base.shape.vision_start;
      cfg.cache.wht_enabled = base.cache.wht_enabled;
      cfg.tsa_layers = base.tsa_layers;
      if (!model.empty()) cfg.tsa_layers = akvq::configured_tsa_layers(model);
      if (!policy_path.empty()) {
        const akvq::PolicyFile pf = akvq::load_policy(policy_path);
        akvq::require(pf.n_layers == cfg.cache.n_layers, akvq::ErrorKind::kParameter,
                      "policy file has " + std::to_string(pf.n_layers) + " layers, simulation has " +
                          std::to_string(cfg.cache.n_layers));
        cfg.tsa_layers.clear();
        for (std::size_t l = 0; l < pf.patterns.size(); ++l)
          if (pf.patterns[l] == akvq::AttentionPattern::kTsa) cfg.tsa_layers.insert(l);
        cfg.cache.recent_window = pf.recent_window;
        cfg.cache.n_pivot_max = pf.n_pivot_max;
        cfg.tau = pf.tau;
        cfg.protect_text_in_psa = cfg.protect_text_in_psa || pf.protect_text_in_psa;
      }
      if (!tsa_text.empty()) cfg.tsa_layers = parse_layer_list(tsa_text);
      for (std::size_t l : cfg.tsa_layers)
        akvq::require(l < cfg.cache.n_layers, akvq::ErrorKind::kParameter,
                      "TSA layer " + std::to_string(l) + " out of range");
      if (!methods_text.empty()) {
        sopt.methods.clear();
        std::stringstream ss(methods_text);
        std::string m;
        while (std::getline(ss, m, ','))
          if (!(m = akvq::detail::trim(m)).empty()) sopt.methods.push_back(m);
      }
      akvq::cmd_simulate(sopt, std::cout);
    } else if (*report) {
      akvq::cmd_report(ropt, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
