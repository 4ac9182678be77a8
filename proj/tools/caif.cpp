// Command-line front end: generate / sweep / entropy-profile / bench / serve.
// Exit codes: 0 success, 2 configuration or validation problem, 3 runtime
// failure after the run started.

#include <cstdint>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "caif/run.hpp"
#include "caif/server.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  int top_j = 0;
  int top_k = 0;
  std::string mode;
  double temperature = 0.0;
  int max_new_tokens = 0;
  int samples_per_prompt = 0;
  std::string prompts;
  bool emit_traces = false;
  double attr_threshold = 0.0;
  std::vector<int> lengths;
  int repeats = 0;

  CLI::Option* o_out = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_alpha = nullptr;
  CLI::Option* o_top_j = nullptr;
  CLI::Option* o_top_k = nullptr;
  CLI::Option* o_mode = nullptr;
  CLI::Option* o_temperature = nullptr;
  CLI::Option* o_max_new_tokens = nullptr;
  CLI::Option* o_samples = nullptr;
  CLI::Option* o_prompts = nullptr;
  CLI::Option* o_emit_traces = nullptr;
  CLI::Option* o_attr_threshold = nullptr;
  CLI::Option* o_lengths = nullptr;
  CLI::Option* o_repeats = nullptr;
};

void add_common_flags(CLI::App* cmd, Overrides& f) {
  cmd->add_option("--config", f.config, "run configuration (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  f.o_out = cmd->add_option("--out", f.out, "output path (overrides config \"out\")");
  f.o_seed = cmd->add_option("--seed", f.seed, "base seed (overrides config)");
  f.o_alpha = cmd->add_option("--alpha", f.alpha, "guidance strength");
  f.o_top_j = cmd->add_option("--top_j,--top-j", f.top_j, "classifier candidate count");
  f.o_top_k = cmd->add_option("--top_k,--top-k", f.top_k, "sampling candidate count");
  f.o_mode = cmd->add_option("--mode", f.mode, "logprob | log_one_minus_prob");
  f.o_temperature = cmd->add_option("--temperature", f.temperature, "softmax temperature");
  f.o_max_new_tokens = cmd->add_option("--max_new_tokens,--max-new-tokens",
                                       f.max_new_tokens, "continuation length cap");
  f.o_samples = cmd->add_option("--samples_per_prompt,--samples-per-prompt",
                                f.samples_per_prompt, "samples generated per prompt");
  f.o_prompts = cmd->add_option("--prompts", f.prompts, "prompts file (token text)");
  f.o_emit_traces = cmd->add_flag("--emit_traces,--emit-traces", f.emit_traces,
                                  "include step traces in JSONL");
  f.o_attr_threshold = cmd->add_option("--attr_threshold,--attr-threshold",
                                       f.attr_threshold, "attribute probability threshold");
  f.o_lengths = cmd->add_option("--lengths", f.lengths, "bench lengths");
  f.o_repeats = cmd->add_option("--repeats", f.repeats, "bench repeats per length");
}

caif::RunConfig load_with_overrides(const Overrides& f) {
  caif::RunConfig cfg = caif::RunConfig::load(f.config);
  if (f.o_out->count()) cfg.out_path = f.out;
  if (f.o_seed->count()) cfg.base_seed = f.seed;
  if (f.o_alpha->count()) cfg.guidance.alpha = f.alpha;
  if (f.o_top_j->count()) cfg.guidance.top_j = f.top_j;
  if (f.o_top_k->count()) cfg.guidance.top_k = f.top_k;
  if (f.o_mode->count()) cfg.guidance.mode = caif::parse_mode(f.mode);
  if (f.o_temperature->count()) cfg.guidance.temperature = f.temperature;
  if (f.o_max_new_tokens->count()) cfg.guidance.max_new_tokens = f.max_new_tokens;
  if (f.o_samples->count()) cfg.samples_per_prompt = f.samples_per_prompt;
  if (f.o_prompts->count()) {
    cfg.prompts_path = f.prompts;
    cfg.inline_prompts.clear();
  }
  if (f.o_emit_traces->count()) cfg.emit_traces = true;
  if (f.o_attr_threshold->count()) cfg.attr_threshold = f.attr_threshold;
  if (f.o_lengths->count()) cfg.bench.lengths = f.lengths;
  if (f.o_repeats->count()) cfg.bench.repeats = f.repeats;
  return cfg;
}

int cmd_generate(const Overrides& f) {
  const caif::RunConfig cfg = load_with_overrides(f);
  const caif::GenerateOutcome out = caif::run_generate(cfg);
  if (out.distinct_degenerate) {
    std::cerr << "warning: some prompt groups had no n-grams to pool; their "
                 "distinct-n is counted as 0\n";
  }
  std::cout << caif::render_report(out.report, "caif");
  std::cout << "guided fraction observed: " << out.guided_fraction << "\n";
  if (!cfg.out_path.empty()) {
    std::cout << "records: " << cfg.out_path << "\n"
              << "report:  " << cfg.out_path << ".report.json\n";
  }
  return 0;
}

int cmd_sweep(const Overrides& f) {
  const caif::RunConfig cfg = load_with_overrides(f);
  const std::vector<caif::SweepRow> rows = caif::run_sweep(cfg);
  std::cout << caif::sweep_csv_header() << "\n";
  for (const caif::SweepRow& r : rows) {
    std::cout << caif::sweep_csv_row(r) << "\n";
  }
  if (!cfg.out_path.empty()) {
    std::cout << "csv: " << cfg.out_path << "\n";
  }
  return 0;
}

int cmd_entropy_profile(const Overrides& f) {
  const caif::RunConfig cfg = load_with_overrides(f);
  const caif::EntropyProfile profile = caif::run_entropy_profile(cfg);
  std::cout << "entropy samples: " << profile.samples_sorted.size() << " in ["
            << profile.bin_lo << ", " << profile.bin_hi << "]\n";
  std::cout << "guided_fraction_target,threshold_nats,guided_fraction_at_threshold\n";
  for (int pct = 10; pct <= 90; pct += 10) {
    const double target = pct / 100.0;
    const double th = caif::entropy_quantile_threshold(profile, target);
    std::cout << target << "," << th << "," << profile.fraction_above(th) << "\n";
  }
  if (!cfg.out_path.empty()) {
    std::cout << "profile: " << cfg.out_path << "\n";
  }
  return 0;
}

int cmd_bench(const Overrides& f) {
  const caif::RunConfig cfg = load_with_overrides(f);
  const std::vector<caif::BenchRow> rows = caif::run_bench(cfg);
  std::cout << caif::bench_csv_header() << "\n";
  for (const caif::BenchRow& r : rows) {
    std::cout << r.length << "," << r.mean_ms << "," << r.guided_steps << ","
              << r.scorer_calls << "," << r.scorer_sequences_scored << "\n";
  }
  if (!cfg.out_path.empty()) {
    std::cout << "csv: " << cfg.out_path << "\n";
  }
  return 0;
}

int cmd_serve(const std::string& config_path, const std::string& host, int port) {
  const caif::RunConfig cfg = caif::RunConfig::load(config_path);
  std::shared_ptr<caif::LogitSource> lm = caif::detail::build_model(cfg.model);
  std::shared_ptr<caif::AttributeScorer> scorer;
  if (cfg.scorer) {
    scorer = caif::detail::build_scorer(*cfg.scorer, lm->vocabulary());
  }
  caif::LoopbackServer server(lm->vocabulary(), lm.get(), scorer.get(), host, port);
  std::cout << "serving " << server.base_url() << "\n"
            << "vocab fingerprint " << lm->vocabulary().fingerprint_hex() << "\n"
            << "endpoints: /v1/vocab /v1/logits"
            << (scorer ? " /v1/score" : "") << "\n";
  std::promise<void>().get_future().wait();  // run until killed
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"classifier-guided text generation"};
  app.require_subcommand(1);

  Overrides gen_f, sweep_f, profile_f, bench_f;
  CLI::App* gen = app.add_subcommand("generate", "sample continuations and report metrics");
  add_common_flags(gen, gen_f);
  CLI::App* sweep = app.add_subcommand("sweep", "metrics across an alpha/mode/criterion grid");
  add_common_flags(sweep, sweep_f);
  CLI::App* profile =
      app.add_subcommand("entropy-profile", "per-step entropy distribution of unguided runs");
  add_common_flags(profile, profile_f);
  CLI::App* bench = app.add_subcommand("bench", "wall-clock and call accounting per length");
  add_common_flags(bench, bench_f);

  std::string serve_config, serve_host = "127.0.0.1";
  int serve_port = 0;
  CLI::App* serve = app.add_subcommand("serve", "host the configured model over HTTP");
  serve->add_option("--config", serve_config, "run configuration (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  serve->add_option("--host", serve_host, "interface to bind");
  serve->add_option("--port", serve_port, "port to bind (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_f);
    if (sweep->parsed()) return cmd_sweep(sweep_f);
    if (profile->parsed()) return cmd_entropy_profile(profile_f);
    if (bench->parsed()) return cmd_bench(bench_f);
    if (serve->parsed()) return cmd_serve(serve_config, serve_host, serve_port);
  } catch (const caif::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const caif::InvalidInputError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
