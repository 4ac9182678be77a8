#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caif/client.hpp"
#include "caif/core.hpp"
#include "caif/metrics.hpp"
#include "caif/models.hpp"
#include "caif/sampler.hpp"

namespace caif {

/// Problem with the configuration or the referenced assets, detected before
/// any output is produced. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Failure while a run was already underway (a step error, a dropped remote
/// connection, an unscorable record). CLI exit code 3; whatever was written
/// before the failure stays on disk.
struct RunError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelSpec {
  std::string kind;  // "trigram" | "table" | "remote"
  std::string path;
  double smoothing_k = 1.0;
  std::string url;
  int timeout_ms = 5000;
  int max_retries = 2;
};

struct ScorerSpec {
  std::string kind;  // "lexicon" | "table" | "remote"
  std::string path;
  double w0 = -2.0;
  double w1 = 2.0;
  std::string url;
  int timeout_ms = 5000;
  int max_retries = 2;
};

enum class AttrScope { kContinuationOnly, kPromptAndContinuation };

struct SweepSpec {
  std::vector<double> alphas;
  std::vector<GuidanceMode> modes;
  std::vector<StepCriterion> criteria;
};

struct BenchSpec {
  std::vector<int> lengths = {10, 20, 50, 100};
  int repeats = 100;
};

struct RunConfig {
  ModelSpec model;
  std::optional<ModelSpec> eval_model;  // defaults to the generation model
  std::optional<ScorerSpec> scorer;
  AttributeTarget attribute{"flagged", Polarity::kAvoid};
  GuidanceConfig guidance;
  std::string prompts_path;              // token strings, one prompt per line
  std::vector<TokenSeq> inline_prompts;  // alternative: ids straight in the config
  int samples_per_prompt = 25;
  std::uint64_t base_seed = 0;
  std::string out_path;
  AttrScope attr_scope = AttrScope::kContinuationOnly;
  double attr_threshold = 0.5;
  bool emit_traces = false;
  int entropy_bins = 20;
  std::optional<SweepSpec> sweep;
  BenchSpec bench;

  static RunConfig load(const std::string& path);
  static RunConfig from_json(const nlohmann::json& j,
                             const std::filesystem::path& base_dir);
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void check_keys(const nlohmann::json& obj,
                       const std::set<std::string>& allowed,
                       const std::string& context) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown key \"" + key + "\" in " + context);
    }
  }
}

inline std::string resolve_path(const std::string& p,
                                const std::filesystem::path& base_dir) {
  std::filesystem::path fp(p);
  if (fp.is_absolute() || base_dir.empty()) {
    return p;
  }
  return (base_dir / fp).lexically_normal().string();
}

template <typename T>
T get_field(const nlohmann::json& obj, const std::string& key, T fallback,
            const std::string& context) {
  if (!obj.contains(key)) {
    return fallback;
  }
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for \"" + key + "\" in " + context + ": " + e.what());
  }
}

template <typename T>
T require_field(const nlohmann::json& obj, const std::string& key,
                const std::string& context) {
  if (!obj.contains(key)) {
    throw ConfigError("missing required key \"" + key + "\" in " + context);
  }
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for \"" + key + "\" in " + context + ": " + e.what());
  }
}

}  // namespace detail

inline GuidanceMode parse_mode(const std::string& s) {
  if (s == "logprob") {
    return GuidanceMode::kLogProb;
  }
  if (s == "log_one_minus_prob") {
    return GuidanceMode::kLogOneMinusProb;
  }
  throw ConfigError("unknown guidance mode \"" + s +
                    "\" (expected \"logprob\" or \"log_one_minus_prob\")");
}

inline std::string mode_to_string(GuidanceMode m) {
  return m == GuidanceMode::kLogProb ? "logprob" : "log_one_minus_prob";
}

inline StepCriterion parse_criterion(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    throw ConfigError("criterion must be an object with a \"kind\" string");
  }
  const std::string kind = j["kind"].get<std::string>();
  if (kind == "always") {
    detail::check_keys(j, {"kind"}, "criterion");
    return StepCriterion::always();
  }
  if (kind == "periodic") {
    detail::check_keys(j, {"kind", "period"}, "criterion");
    return StepCriterion::periodic(detail::require_field<int>(j, "period", "criterion"));
  }
  if (kind == "entropy") {
    detail::check_keys(j, {"kind", "threshold_nats"}, "criterion");
    return StepCriterion::entropy(
        detail::require_field<double>(j, "threshold_nats", "criterion"));
  }
  throw ConfigError("unknown criterion kind \"" + kind + "\"");
}

inline std::string criterion_to_string(const StepCriterion& c) {
  switch (c.kind) {
    case StepCriterion::Kind::kAlways:
      return "always";
    case StepCriterion::Kind::kPeriodic:
      return "periodic(" + std::to_string(c.period) + ")";
    case StepCriterion::Kind::kEntropy:
      return "entropy(" + detail::format_double(c.threshold_nats) + ")";
  }
  return "always";
}

inline std::string stop_reason_to_string(StopReason r) {
  return r == StopReason::kEos ? "eos" : "max_tokens";
}

namespace detail {

inline ModelSpec parse_model_spec(const nlohmann::json& j,
                                  const std::filesystem::path& base_dir,
                                  const std::string& context) {
  check_keys(j, {"kind", "path", "smoothing_k", "url", "timeout_ms", "max_retries"},
             context);
  ModelSpec m;
  m.kind = require_field<std::string>(j, "kind", context);
  if (m.kind == "trigram" || m.kind == "table") {
    m.path = resolve_path(require_field<std::string>(j, "path", context), base_dir);
    m.smoothing_k = get_field<double>(j, "smoothing_k", m.smoothing_k, context);
  } else if (m.kind == "remote") {
    m.url = require_field<std::string>(j, "url", context);
    m.timeout_ms = get_field<int>(j, "timeout_ms", m.timeout_ms, context);
    m.max_retries = get_field<int>(j, "max_retries", m.max_retries, context);
  } else {
    throw ConfigError("unknown model kind \"" + m.kind + "\" in " + context);
  }
  return m;
}

inline ScorerSpec parse_scorer_spec(const nlohmann::json& j,
                                    const std::filesystem::path& base_dir,
                                    const std::string& context) {
  check_keys(j, {"kind", "path", "w0", "w1", "url", "timeout_ms", "max_retries"},
             context);
  ScorerSpec s;
  s.kind = require_field<std::string>(j, "kind", context);
  if (s.kind == "lexicon" || s.kind == "table") {
    s.path = resolve_path(require_field<std::string>(j, "path", context), base_dir);
    s.w0 = get_field<double>(j, "w0", s.w0, context);
    s.w1 = get_field<double>(j, "w1", s.w1, context);
  } else if (s.kind == "remote") {
    s.url = require_field<std::string>(j, "url", context);
    s.timeout_ms = get_field<int>(j, "timeout_ms", s.timeout_ms, context);
    s.max_retries = get_field<int>(j, "max_retries", s.max_retries, context);
  } else {
    throw ConfigError("unknown scorer kind \"" + s.kind + "\" in " + context);
  }
  return s;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j,
                                      const std::filesystem::path& base_dir) {
  if (!j.is_object()) {
    throw ConfigError("config root must be a JSON object");
  }
  detail::check_keys(
      j,
      {"model", "eval_model", "scorer", "attribute", "guidance", "prompts",
       "prompt_ids", "samples_per_prompt", "base_seed", "out", "attr_scope",
       "attr_threshold", "emit_traces", "entropy_bins", "sweep", "bench"},
      "config");
  RunConfig cfg;
  if (!j.contains("model")) {
    throw ConfigError("config needs a \"model\" section");
  }
  cfg.model = detail::parse_model_spec(j["model"], base_dir, "model");
  if (j.contains("eval_model")) {
    cfg.eval_model = detail::parse_model_spec(j["eval_model"], base_dir, "eval_model");
  }
  if (j.contains("scorer")) {
    cfg.scorer = detail::parse_scorer_spec(j["scorer"], base_dir, "scorer");
  }
  if (j.contains("attribute")) {
    const auto& a = j["attribute"];
    detail::check_keys(a, {"class_label", "polarity"}, "attribute");
    cfg.attribute.class_label =
        detail::require_field<std::string>(a, "class_label", "attribute");
    const std::string pol =
        detail::get_field<std::string>(a, "polarity", "avoid", "attribute");
    if (pol == "avoid") {
      cfg.attribute.polarity = Polarity::kAvoid;
    } else if (pol == "attract") {
      cfg.attribute.polarity = Polarity::kAttract;
    } else {
      throw ConfigError("attribute polarity must be \"avoid\" or \"attract\"");
    }
  }
  if (j.contains("guidance")) {
    const auto& g = j["guidance"];
    detail::check_keys(g,
                       {"alpha", "top_j", "top_k", "mode", "criterion", "temperature",
                        "max_new_tokens", "include_prompt_in_classifier_input",
                        "prob_clamp_epsilon"},
                       "guidance");
    cfg.guidance.alpha = detail::get_field<double>(g, "alpha", cfg.guidance.alpha, "guidance");
    cfg.guidance.top_j = detail::get_field<int>(g, "top_j", cfg.guidance.top_j, "guidance");
    cfg.guidance.top_k = detail::get_field<int>(g, "top_k", cfg.guidance.top_k, "guidance");
    if (g.contains("mode")) {
      cfg.guidance.mode = parse_mode(detail::require_field<std::string>(g, "mode", "guidance"));
    }
    if (g.contains("criterion")) {
      cfg.guidance.criterion = parse_criterion(g["criterion"]);
    }
    cfg.guidance.temperature =
        detail::get_field<double>(g, "temperature", cfg.guidance.temperature, "guidance");
    cfg.guidance.max_new_tokens =
        detail::get_field<int>(g, "max_new_tokens", cfg.guidance.max_new_tokens, "guidance");
    cfg.guidance.include_prompt_in_classifier_input =
        detail::get_field<bool>(g, "include_prompt_in_classifier_input",
                                cfg.guidance.include_prompt_in_classifier_input, "guidance");
    cfg.guidance.prob_clamp_epsilon = detail::get_field<double>(
        g, "prob_clamp_epsilon", cfg.guidance.prob_clamp_epsilon, "guidance");
  }
  if (j.contains("prompts")) {
    cfg.prompts_path = detail::resolve_path(
        detail::require_field<std::string>(j, "prompts", "config"), base_dir);
  }
  if (j.contains("prompt_ids")) {
    try {
      cfg.inline_prompts = j["prompt_ids"].get<std::vector<TokenSeq>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad \"prompt_ids\": ") + e.what());
    }
  }
  cfg.samples_per_prompt =
      detail::get_field<int>(j, "samples_per_prompt", cfg.samples_per_prompt, "config");
  cfg.base_seed =
      detail::get_field<std::uint64_t>(j, "base_seed", cfg.base_seed, "config");
  if (j.contains("out")) {
    cfg.out_path = detail::resolve_path(
        detail::require_field<std::string>(j, "out", "config"), base_dir);
  }
  if (j.contains("attr_scope")) {
    const std::string s = j["attr_scope"].get<std::string>();
    if (s == "continuation_only") {
      cfg.attr_scope = AttrScope::kContinuationOnly;
    } else if (s == "prompt_and_continuation") {
      cfg.attr_scope = AttrScope::kPromptAndContinuation;
    } else {
      throw ConfigError("attr_scope must be \"continuation_only\" or "
                        "\"prompt_and_continuation\"");
    }
  }
  cfg.attr_threshold =
      detail::get_field<double>(j, "attr_threshold", cfg.attr_threshold, "config");
  cfg.emit_traces = detail::get_field<bool>(j, "emit_traces", cfg.emit_traces, "config");
  cfg.entropy_bins =
      detail::get_field<int>(j, "entropy_bins", cfg.entropy_bins, "config");
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::check_keys(s, {"alpha", "mode", "criterion"}, "sweep");
    SweepSpec spec;
    spec.alphas = detail::get_field<std::vector<double>>(s, "alpha", {cfg.guidance.alpha},
                                                         "sweep");
    if (s.contains("mode")) {
      for (const auto& m : s["mode"]) {
        spec.modes.push_back(parse_mode(m.get<std::string>()));
      }
    } else {
      spec.modes.push_back(cfg.guidance.mode);
    }
    if (s.contains("criterion")) {
      for (const auto& c : s["criterion"]) {
        spec.criteria.push_back(parse_criterion(c));
      }
    } else {
      spec.criteria.push_back(cfg.guidance.criterion);
    }
    if (spec.alphas.empty() || spec.modes.empty() || spec.criteria.empty()) {
      throw ConfigError("sweep grid has an empty axis");
    }
    cfg.sweep = std::move(spec);
  }
  if (j.contains("bench")) {
    const auto& b = j["bench"];
    detail::check_keys(b, {"lengths", "repeats"}, "bench");
    cfg.bench.lengths =
        detail::get_field<std::vector<int>>(b, "lengths", cfg.bench.lengths, "bench");
    cfg.bench.repeats = detail::get_field<int>(b, "repeats", cfg.bench.repeats, "bench");
  }
  return cfg;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j, std::filesystem::path(path).parent_path());
}

/// Decorator counting scorer traffic; used by the bench harness and by the
/// call-accounting checks.
class CountingScorer final : public AttributeScorer {
 public:
  explicit CountingScorer(const AttributeScorer& inner) : inner_(&inner) {}

  std::vector<double> score_batch(std::span<const TokenSeq> sequences,
                                  const AttributeTarget& target) const override {
    ++calls_;
    sequences_ += static_cast<std::int64_t>(sequences.size());
    return inner_->score_batch(sequences, target);
  }

  std::int64_t calls() const { return calls_; }
  std::int64_t sequences_scored() const { return sequences_; }
  void reset() {
    calls_ = 0;
    sequences_ = 0;
  }

 private:
  const AttributeScorer* inner_;
  mutable std::int64_t calls_ = 0;
  mutable std::int64_t sequences_ = 0;
};

namespace detail {

/// Scorer stand-in for runs that are guaranteed never to consult the
/// classifier (entropy profiling). Any call is a bug.
class NeverCalledScorer final : public AttributeScorer {
 public:
  std::vector<double> score_batch(std::span<const TokenSeq>,
                                  const AttributeTarget&) const override {
    throw std::logic_error("scorer consulted in a scorer-free run");
  }
};

}  // namespace detail

struct RunAssets {
  std::shared_ptr<LogitSource> lm;
  std::shared_ptr<LogitSource> eval_lm;  // aliases lm when no eval model is given
  std::shared_ptr<AttributeScorer> scorer;
  std::vector<TokenSeq> prompts;
};

namespace detail {

inline std::shared_ptr<LogitSource> build_model(const ModelSpec& spec) {
  try {
    if (spec.kind == "trigram") {
      return std::make_shared<TrigramLM>(
          TrigramLM::train_file(spec.path, spec.smoothing_k));
    }
    if (spec.kind == "table") {
      return std::make_shared<TableLM>(TableLM::load(spec.path));
    }
    RemoteEndpoint ep{spec.url, spec.timeout_ms, spec.max_retries};
    return std::make_shared<RemoteLogitSource>(std::move(ep));
  } catch (const TransportError& e) {
    throw ConfigError("cannot reach model at " + spec.url + ": " + e.what());
  } catch (const InvalidInputError& e) {
    throw ConfigError(std::string("model asset invalid: ") + e.what());
  }
}

inline std::shared_ptr<AttributeScorer> build_scorer(const ScorerSpec& spec,
                                                     const Vocabulary& lm_vocab) {
  try {
    if (spec.kind == "lexicon") {
      return std::make_shared<LexiconScorer>(
          LexiconScorer::load(spec.path, lm_vocab, spec.w0, spec.w1));
    }
    if (spec.kind == "table") {
      return std::make_shared<TableScorer>(TableScorer::load(spec.path));
    }
    RemoteEndpoint ep{spec.url, spec.timeout_ms, spec.max_retries};
    return std::make_shared<RemoteAttributeScorer>(std::move(ep),
                                                   lm_vocab.fingerprint_hex());
  } catch (const TransportError& e) {
    throw ConfigError("cannot set up scorer at " + spec.url + ": " + e.what());
  } catch (const InvalidInputError& e) {
    throw ConfigError(std::string("scorer asset invalid: ") + e.what());
  }
}

inline std::vector<TokenSeq> load_prompts(const RunConfig& cfg, const Vocabulary& vocab) {
  std::vector<TokenSeq> prompts;
  if (!cfg.prompts_path.empty() && !cfg.inline_prompts.empty()) {
    throw ConfigError("give either \"prompts\" or \"prompt_ids\", not both");
  }
  if (!cfg.prompts_path.empty()) {
    std::ifstream in(cfg.prompts_path);
    if (!in) {
      throw ConfigError("cannot open prompts file: " + cfg.prompts_path);
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream ls(line);
      TokenSeq ids;
      std::string word;
      while (ls >> word) {
        const std::optional<TokenId> id = vocab.find(word);
        if (!id) {
          throw ConfigError("prompt token \"" + word + "\" (line " +
                            std::to_string(line_no) + " of " + cfg.prompts_path +
                            ") is not in the model vocabulary");
        }
        ids.push_back(*id);
      }
      if (!ids.empty()) {
        prompts.push_back(std::move(ids));
      }
    }
  } else {
    prompts = cfg.inline_prompts;
    for (const TokenSeq& p : prompts) {
      if (!vocab.contains_ids(p)) {
        throw ConfigError("prompt_ids contains an id outside the model vocabulary");
      }
    }
  }
  if (prompts.empty()) {
    throw ConfigError("no prompts: the run would be empty");
  }
  return prompts;
}

}  // namespace detail

/// Loads every asset the run needs and validates the whole configuration.
/// Throws ConfigError before any output file is touched.
inline RunAssets build_assets(const RunConfig& cfg, bool need_scorer = true) {
  try {
    cfg.guidance.validate();
    cfg.attribute.validate();
  } catch (const InvalidInputError& e) {
    throw ConfigError(e.what());
  }
  if (cfg.samples_per_prompt < 1) {
    throw ConfigError("samples_per_prompt must be >= 1");
  }
  if (cfg.guidance.max_new_tokens < 1) {
    throw ConfigError("max_new_tokens must be >= 1 for a run (metrics need tokens)");
  }
  if (!(cfg.attr_threshold >= 0.0 && cfg.attr_threshold <= 1.0)) {
    throw ConfigError("attr_threshold must be in [0,1]");
  }
  RunAssets a;
  a.lm = detail::build_model(cfg.model);
  a.eval_lm = cfg.eval_model ? detail::build_model(*cfg.eval_model) : a.lm;
  if (cfg.scorer) {
    a.scorer = detail::build_scorer(*cfg.scorer, a.lm->vocabulary());
  } else if (need_scorer) {
    throw ConfigError("this run needs a \"scorer\" section");
  }
  a.prompts = detail::load_prompts(cfg, a.lm->vocabulary());
  return a;
}

inline nlohmann::ordered_json trace_to_json(const StepTrace& t) {
  nlohmann::ordered_json j;
  j["step_index"] = t.step_index;
  j["entropy_nats"] = t.entropy_nats;
  j["guided"] = t.guided;
  j["candidate_ids"] = t.candidate_ids;
  j["base_logprobs"] = t.base_logprobs;
  if (t.guided) {
    j["class_probs"] = t.class_probs;
    j["combined_scores"] = t.combined_scores;
  }
  j["sampled_id"] = t.sampled_id;
  return j;
}

inline nlohmann::ordered_json record_to_json(const GenerationRecord& rec,
                                             int prompt_index, int sample_index,
                                             bool with_traces) {
  nlohmann::ordered_json j;
  j["prompt_index"] = prompt_index;
  j["sample_index"] = sample_index;
  j["seed"] = rec.seed;
  j["prompt_ids"] = rec.prompt;
  j["continuation_ids"] = rec.continuation;
  j["stopped_by"] = stop_reason_to_string(rec.stopped_by);
  if (with_traces) {
    j["traces"] = nlohmann::ordered_json::array();
    for (const StepTrace& t : rec.traces) {
      j["traces"].push_back(trace_to_json(t));
    }
  }
  return j;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["ppl"] = r.ppl;
  j["dist_n"] = nlohmann::ordered_json::object();
  for (const auto& [n, pct] : r.dist_n) {
    j["dist_n"][std::to_string(n)] = pct;
  }
  j["attr_mean_pct"] = r.attr_mean_pct;
  j["attr_max_pct"] = r.attr_max_pct;
  j["attr_prob_pct"] = r.attr_prob_pct;
  j["num_prompts"] = r.num_prompts;
  j["samples_per_prompt"] = r.samples_per_prompt;
  return j;
}

struct GenerateOutcome {
  std::vector<GenerationRecord> records;  // prompt-major, then sample index
  std::vector<std::vector<double>> attr_scores;  // [prompt][sample]
  MetricsReport report;
  double guided_fraction = 0.0;
  std::int64_t total_steps = 0;
  bool distinct_degenerate = false;
};

namespace detail {

/// Generation loop plus metrics for one configuration. When `jsonl` is given
/// each finished record is written and flushed immediately, so everything
/// completed before a failure survives on disk.
inline GenerateOutcome run_generations(const RunConfig& cfg, const RunAssets& assets,
                                       const GuidanceConfig& guidance,
                                       std::ostream* jsonl) {
  GenerateOutcome out;
  const int num_prompts = static_cast<int>(assets.prompts.size());
  out.records.reserve(static_cast<std::size_t>(num_prompts) *
                      static_cast<std::size_t>(cfg.samples_per_prompt));
  for (int p = 0; p < num_prompts; ++p) {
    for (int s = 0; s < cfg.samples_per_prompt; ++s) {
      const std::uint64_t seed =
          derive_seed(cfg.base_seed, static_cast<std::uint64_t>(p),
                      static_cast<std::uint64_t>(s));
      GenerationRecord rec;
      try {
        rec = generate(assets.prompts[static_cast<std::size_t>(p)], *assets.lm,
                       *assets.scorer, cfg.attribute, guidance, seed);
      } catch (const GenerationAborted& e) {
        if (jsonl) {
          jsonl->flush();
        }
        throw RunError("generation failed for prompt " + std::to_string(p) +
                       " sample " + std::to_string(s) + ": " + e.what());
      } catch (const TransportError& e) {
        if (jsonl) {
          jsonl->flush();
        }
        throw RunError("generation failed for prompt " + std::to_string(p) +
                       " sample " + std::to_string(s) + ": " + e.what());
      }
      if (jsonl) {
        (*jsonl) << record_to_json(rec, p, s, cfg.emit_traces).dump() << "\n";
        jsonl->flush();
      }
      out.records.push_back(std::move(rec));
    }
  }

  for (const GenerationRecord& rec : out.records) {
    for (const StepTrace& t : rec.traces) {
      ++out.total_steps;
      out.guided_fraction += t.guided ? 1.0 : 0.0;
    }
  }
  if (out.total_steps > 0) {
    out.guided_fraction /= static_cast<double>(out.total_steps);
  }

  // Classifier scores for the attribute columns, one batch for the whole run.
  std::vector<TokenSeq> to_score;
  to_score.reserve(out.records.size());
  for (const GenerationRecord& rec : out.records) {
    if (cfg.attr_scope == AttrScope::kPromptAndContinuation) {
      TokenSeq seq = rec.prompt;
      seq.insert(seq.end(), rec.continuation.begin(), rec.continuation.end());
      to_score.push_back(std::move(seq));
    } else {
      to_score.push_back(rec.continuation);
    }
  }
  std::vector<double> flat_scores;
  try {
    flat_scores = assets.scorer->score_batch(to_score, cfg.attribute);
  } catch (const std::exception& e) {
    throw RunError(std::string("attribute scoring of the finished records failed: ") +
                   e.what());
  }
  if (flat_scores.size() != to_score.size()) {
    throw RunError("attribute scorer returned the wrong number of scores");
  }
  out.attr_scores.assign(static_cast<std::size_t>(num_prompts), {});
  for (std::size_t i = 0; i < flat_scores.size(); ++i) {
    out.attr_scores[i / static_cast<std::size_t>(cfg.samples_per_prompt)].push_back(
        flat_scores[i]);
  }

  // Perplexity under the eval model, remapping ids when the vocabularies differ.
  const bool same_vocab =
      assets.eval_lm.get() == assets.lm.get() ||
      assets.eval_lm->vocabulary().fingerprint() == assets.lm->vocabulary().fingerprint();
  double ppl_sum = 0.0;
  for (const GenerationRecord& rec : out.records) {
    try {
      const TokenSeq prompt =
          same_vocab ? rec.prompt
                     : remap_ids(rec.prompt, assets.lm->vocabulary(),
                                 assets.eval_lm->vocabulary());
      const TokenSeq cont =
          same_vocab ? rec.continuation
                     : remap_ids(rec.continuation, assets.lm->vocabulary(),
                                 assets.eval_lm->vocabulary());
      ppl_sum += perplexity(*assets.eval_lm, prompt, cont);
    } catch (const InvalidInputError& e) {
      throw RunError(std::string("perplexity evaluation failed: ") + e.what());
    } catch (const TransportError& e) {
      throw RunError(std::string("perplexity evaluation failed: ") + e.what());
    }
  }
  out.report.ppl = ppl_sum / static_cast<double>(out.records.size());

  for (int n = 1; n <= 3; ++n) {
    double sum_pct = 0.0;
    for (int p = 0; p < num_prompts; ++p) {
      std::vector<TokenSeq> conts;
      conts.reserve(static_cast<std::size_t>(cfg.samples_per_prompt));
      for (int s = 0; s < cfg.samples_per_prompt; ++s) {
        conts.push_back(
            out.records[static_cast<std::size_t>(p) *
                            static_cast<std::size_t>(cfg.samples_per_prompt) +
                        static_cast<std::size_t>(s)]
                .continuation);
      }
      const DistinctN d = distinct_n(conts, n);
      if (d.degenerate) {
        out.distinct_degenerate = true;
      }
      sum_pct += d.pct;
    }
    out.report.dist_n[n] = sum_pct / num_prompts;
  }

  const AttributeStats stats = attribute_stats(out.attr_scores, cfg.attr_threshold);
  out.report.attr_mean_pct = stats.mean_pct;
  out.report.attr_max_pct = stats.max_pct;
  out.report.attr_prob_pct = stats.prob_pct;
  out.report.num_prompts = num_prompts;
  out.report.samples_per_prompt = cfg.samples_per_prompt;
  return out;
}

inline std::ofstream open_output(const std::string& path) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot open output file for writing: " + path);
  }
  return out;
}

}  // namespace detail

/// The `generate` subcommand: all samples for all prompts, a JSONL record
/// per sample, and a metrics report next to it (<out>.report.json).
inline GenerateOutcome run_generate(const RunConfig& cfg) {
  const RunAssets assets = build_assets(cfg);
  std::ofstream jsonl;
  if (!cfg.out_path.empty()) {
    jsonl = detail::open_output(cfg.out_path);
  }
  GenerateOutcome out = detail::run_generations(cfg, assets, cfg.guidance,
                                                cfg.out_path.empty() ? nullptr : &jsonl);
  if (!cfg.out_path.empty()) {
    nlohmann::ordered_json j = report_to_json(out.report);
    j["guided_fraction_observed"] = out.guided_fraction;
    j["alpha"] = cfg.guidance.alpha;
    j["mode"] = mode_to_string(cfg.guidance.mode);
    j["criterion"] = criterion_to_string(cfg.guidance.criterion);
    std::ofstream rep = detail::open_output(cfg.out_path + ".report.json");
    rep << j.dump(2) << "\n";
  }
  return out;
}

struct SweepRow {
  double alpha = 0.0;
  GuidanceMode mode = GuidanceMode::kLogProb;
  StepCriterion criterion;
  double guided_fraction = 0.0;
  MetricsReport report;
};

inline std::string sweep_csv_header() {
  return "alpha,mode,criterion,guided_fraction_observed,ppl,attr_mean_pct,"
         "attr_max_pct,attr_prob_pct,dist1,dist2,dist3";
}

inline std::string sweep_csv_row(const SweepRow& r) {
  using detail::format_double;
  std::string criterion = criterion_to_string(r.criterion);
  if (criterion.find(',') != std::string::npos) {
    criterion = '"' + criterion + '"';
  }
  return format_double(r.alpha) + "," + mode_to_string(r.mode) + "," + criterion +
         "," + format_double(r.guided_fraction) + "," + format_double(r.report.ppl) +
         "," + format_double(r.report.attr_mean_pct) + "," +
         format_double(r.report.attr_max_pct) + "," +
         format_double(r.report.attr_prob_pct) + "," +
         format_double(r.report.dist_n.at(1)) + "," +
         format_double(r.report.dist_n.at(2)) + "," +
         format_double(r.report.dist_n.at(3));
}

/// The `sweep` subcommand: the cartesian grid of alpha x mode x criterion,
/// one full generation run per point, one CSV row per point.
inline std::vector<SweepRow> run_sweep(const RunConfig& cfg) {
  if (!cfg.sweep) {
    throw ConfigError("sweep run needs a \"sweep\" section");
  }
  const RunAssets assets = build_assets(cfg);
  std::ofstream csv;
  if (!cfg.out_path.empty()) {
    csv = detail::open_output(cfg.out_path);
    csv << sweep_csv_header() << "\n";
    csv.flush();
  }
  std::vector<SweepRow> rows;
  for (const StepCriterion& criterion : cfg.sweep->criteria) {
    for (GuidanceMode mode : cfg.sweep->modes) {
      for (double alpha : cfg.sweep->alphas) {
        GuidanceConfig g = cfg.guidance;
        g.alpha = alpha;
        g.mode = mode;
        g.criterion = criterion;
        try {
          g.validate();
        } catch (const InvalidInputError& e) {
          throw ConfigError(std::string("invalid sweep point: ") + e.what());
        }
        const GenerateOutcome outcome =
            detail::run_generations(cfg, assets, g, nullptr);
        SweepRow row{alpha, mode, criterion, outcome.guided_fraction, outcome.report};
        if (!cfg.out_path.empty()) {
          csv << sweep_csv_row(row) << "\n";
          csv.flush();
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

/// The `entropy-profile` subcommand: unguided runs (alpha must be 0) that
/// pool per-step base-distribution entropies, plus the thresholds that would
/// hit a range of target guided fractions.
inline EntropyProfile run_entropy_profile(const RunConfig& cfg) {
  if (cfg.guidance.alpha != 0.0) {
    throw ConfigError("entropy-profile requires alpha = 0 (unguided statistics)");
  }
  const RunAssets assets = build_assets(cfg, /*need_scorer=*/false);
  RunConfig unguided = cfg;
  unguided.out_path.clear();
  unguided.emit_traces = false;
  GuidanceConfig g = cfg.guidance;
  // Entropy never exceeds ln|V|, so this threshold turns guidance off and no
  // scorer call can happen.
  g.criterion = StepCriterion::entropy(std::numeric_limits<double>::max());
  RunAssets shadow = assets;
  if (!shadow.scorer) {
    shadow.scorer = std::make_shared<detail::NeverCalledScorer>();
  }

  std::vector<double> entropies;
  for (int p = 0; p < static_cast<int>(shadow.prompts.size()); ++p) {
    for (int s = 0; s < cfg.samples_per_prompt; ++s) {
      const std::uint64_t seed =
          derive_seed(cfg.base_seed, static_cast<std::uint64_t>(p),
                      static_cast<std::uint64_t>(s));
      GenerationRecord rec;
      try {
        rec = generate(shadow.prompts[static_cast<std::size_t>(p)], *shadow.lm,
                       *shadow.scorer, cfg.attribute, g, seed);
      } catch (const GenerationAborted& e) {
        throw RunError(std::string("entropy profiling failed: ") + e.what());
      }
      for (const StepTrace& t : rec.traces) {
        entropies.push_back(t.entropy_nats);
      }
    }
  }
  const EntropyProfile profile =
      EntropyProfile::from_samples(std::move(entropies), cfg.entropy_bins);

  if (!cfg.out_path.empty()) {
    nlohmann::ordered_json j;
    j["num_samples"] = profile.samples_sorted.size();
    j["bin_lo"] = profile.bin_lo;
    j["bin_hi"] = profile.bin_hi;
    j["pdf_counts"] = profile.pdf_counts;
    j["thresholds"] = nlohmann::ordered_json::array();
    for (int pct = 5; pct <= 95; pct += 5) {
      const double target = pct / 100.0;
      nlohmann::ordered_json row;
      row["guided_fraction_target"] = target;
      const double th = entropy_quantile_threshold(profile, target);
      row["threshold_nats"] = th;
      row["guided_fraction_at_threshold"] = profile.fraction_above(th);
      j["thresholds"].push_back(row);
    }
    j["samples_sorted"] = profile.samples_sorted;
    std::ofstream out = detail::open_output(cfg.out_path);
    out << j.dump(2) << "\n";
  }
  return profile;
}

struct BenchRow {
  int length = 0;
  double mean_ms = 0.0;
  std::int64_t guided_steps = 0;
  std::int64_t scorer_calls = 0;
  std::int64_t scorer_sequences_scored = 0;
};

inline std::string bench_csv_header() {
  return "length,mean_ms,guided_steps,scorer_calls,scorer_sequences_scored";
}

/// The `bench` subcommand: for each requested length, drive exactly that
/// many sampling steps from the first prompt (EOS does not stop the clock),
/// `repeats` times. Reports mean wall-clock per run and total guided-step /
/// scorer-call / sequences-scored counts across the repeats.
inline std::vector<BenchRow> run_bench(const RunConfig& cfg) {
  if (cfg.bench.repeats < 1) {
    throw ConfigError("bench repeats must be >= 1");
  }
  if (cfg.bench.lengths.empty()) {
    throw ConfigError("bench needs at least one length");
  }
  for (int len : cfg.bench.lengths) {
    if (len < 1) {
      throw ConfigError("bench lengths must be >= 1");
    }
  }
  const RunAssets assets = build_assets(cfg);
  const TokenSeq& prompt = assets.prompts.front();
  CountingScorer counting(*assets.scorer);

  std::vector<BenchRow> rows;
  for (int len : cfg.bench.lengths) {
    BenchRow row;
    row.length = len;
    double total_ms = 0.0;
    counting.reset();
    for (int r = 0; r < cfg.bench.repeats; ++r) {
      const std::uint64_t seed =
          derive_seed(cfg.base_seed, static_cast<std::uint64_t>(len),
                      static_cast<std::uint64_t>(r));
      RandomStream rng(seed);
      TokenSeq prefix = prompt;
      const auto t0 = std::chrono::steady_clock::now();
      for (int step = 0; step < len; ++step) {
        StepOutcome out;
        try {
          out = caif_step(prefix, prompt.size(), *assets.lm, counting, cfg.attribute,
                          cfg.guidance, step, rng);
        } catch (const StepError& e) {
          throw RunError(std::string("bench step failed: ") + e.what());
        }
        row.guided_steps += out.trace.guided ? 1 : 0;
        prefix.push_back(out.token);
      }
      const auto t1 = std::chrono::steady_clock::now();
      total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    row.mean_ms = total_ms / cfg.bench.repeats;
    row.scorer_calls = counting.calls();
    row.scorer_sequences_scored = counting.sequences_scored();
    rows.push_back(row);
  }

  if (!cfg.out_path.empty()) {
    std::ofstream csv = detail::open_output(cfg.out_path);
    csv << bench_csv_header() << "\n";
    for (const BenchRow& r : rows) {
      csv << r.length << "," << detail::format_double(r.mean_ms) << ","
          << r.guided_steps << "," << r.scorer_calls << ","
          << r.scorer_sequences_scored << "\n";
    }
  }
  return rows;
}

}  // namespace caif
