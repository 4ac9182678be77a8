#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caif/core.hpp"
#include "caif/models.hpp"

namespace caif {

/// Scorer or model failure inside one generation step.
struct StepError : std::runtime_error {
  StepError(int step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what),
        step_index(step) {}
  int step_index;
};

/// Per-step diagnostics. When guided, candidate_ids holds the top-j ids by
/// base log-probability and class_probs/combined_scores align with them;
/// when unguided, it holds the plain top-k ids and those two stay empty.
struct StepTrace {
  int step_index = 0;
  double entropy_nats = 0.0;
  bool guided = false;
  std::vector<TokenId> candidate_ids;
  std::vector<double> base_logprobs;
  std::vector<double> class_probs;
  std::vector<double> combined_scores;
  TokenId sampled_id = 0;

  bool operator==(const StepTrace&) const = default;
};

enum class StopReason { kEos, kMaxTokens };

struct GenerationRecord {
  TokenSeq prompt;
  TokenSeq continuation;
  std::vector<StepTrace> traces;
  std::uint64_t seed = 0;
  GuidanceConfig config;
  StopReason stopped_by = StopReason::kMaxTokens;

  bool operator==(const GenerationRecord&) const = default;
};

/// A step error wrapped together with whatever was generated before it.
struct GenerationAborted : std::runtime_error {
  GenerationAborted(GenerationRecord partial_record, const StepError& cause)
      : std::runtime_error(cause.what()), partial(std::move(partial_record)),
        step_index(cause.step_index) {}
  GenerationRecord partial;
  int step_index;
};

inline bool should_guide(const StepCriterion& criterion, int step_index,
                         double entropy_nats) {
  switch (criterion.kind) {
    case StepCriterion::Kind::kAlways:
      return true;
    case StepCriterion::Kind::kPeriodic:
      return step_index % criterion.period == 0;
    case StepCriterion::Kind::kEntropy:
      return entropy_nats > criterion.threshold_nats;
  }
  return true;
}

/// s_t = lp_t + alpha * ln(p_t) (kLogProb) or lp_t + alpha * ln(1 - p_t)
/// (kLogOneMinusProb), with p_t clamped to [eps, 1-eps] first.
inline std::vector<double> combine_scores(std::span<const double> base_logprobs,
                                          std::span<const double> class_probs,
                                          GuidanceMode mode, double alpha,
                                          double eps) {
  if (base_logprobs.size() != class_probs.size()) {
    throw InvalidInputError("combine_scores: length mismatch (" +
                            std::to_string(base_logprobs.size()) + " vs " +
                            std::to_string(class_probs.size()) + ")");
  }
  if (!(eps > 0.0 && eps < 0.5)) {
    throw InvalidInputError("combine_scores: eps must be in (0, 0.5)");
  }
  std::vector<double> out(base_logprobs.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double raw = class_probs[i];
    if (!(raw >= 0.0 && raw <= 1.0)) {
      throw InvalidInputError("combine_scores: class probability outside [0,1]");
    }
    const double p = std::min(std::max(raw, eps), 1.0 - eps);
    const double term = mode == GuidanceMode::kLogProb ? std::log(p) : std::log1p(-p);
    out[i] = base_logprobs[i] + alpha * term;
  }
  return out;
}

/// Renormalized distribution over an explicit candidate set; zero mass
/// elsewhere. ids are score-descending with ties broken by ascending id.
struct SparseDistribution {
  std::vector<TokenId> ids;
  std::vector<double> probs;

  bool operator==(const SparseDistribution&) const = default;
};

struct GuidedStep {
  std::vector<TokenId> candidate_ids;   // top-j by base log-prob
  std::vector<double> base_logprobs;    // aligned with candidate_ids
  std::vector<double> class_probs;      // aligned
  std::vector<double> combined_scores;  // aligned
  SparseDistribution dist;              // over the top-k by combined score
};

namespace detail {

inline std::vector<double> softmax_over(std::span<const double> scores) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> probs(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    probs[i] = std::exp(scores[i] - mx);
    sum += probs[i];
  }
  for (double& p : probs) {
    p /= sum;
  }
  return probs;
}

inline std::size_t inverse_cdf_index(std::span<const double> probs, double u) {
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) {
      return i;
    }
  }
  return probs.size() - 1;
}

inline GuidedStep guided_from_base(std::span<const double> base_logprobs,
                                   const TokenSeq& prefix, std::size_t prompt_len,
                                   const AttributeScorer& scorer,
                                   const AttributeTarget& target,
                                   const GuidanceConfig& config,
                                   std::optional<int> step_index) {
  GuidedStep g;
  const auto vocab_size = base_logprobs.size();
  const int j_eff = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(config.top_j), vocab_size));
  g.candidate_ids = top_m(base_logprobs, j_eff);
  g.base_logprobs.reserve(g.candidate_ids.size());
  for (TokenId id : g.candidate_ids) {
    g.base_logprobs.push_back(base_logprobs[static_cast<std::size_t>(id)]);
  }

  const std::size_t stem_begin =
      config.include_prompt_in_classifier_input ? 0 : std::min(prompt_len, prefix.size());
  std::vector<TokenSeq> extended;
  extended.reserve(g.candidate_ids.size());
  for (TokenId id : g.candidate_ids) {
    TokenSeq seq(prefix.begin() + static_cast<std::ptrdiff_t>(stem_begin), prefix.end());
    seq.push_back(id);
    extended.push_back(std::move(seq));
  }
  try {
    g.class_probs = scorer.score_batch(extended, target);
  } catch (const std::exception& e) {
    if (step_index) {
      throw StepError(*step_index, std::string("attribute scorer failed: ") + e.what());
    }
    throw;
  }
  if (g.class_probs.size() != extended.size()) {
    const std::string msg = "attribute scorer returned " +
                            std::to_string(g.class_probs.size()) + " scores for " +
                            std::to_string(extended.size()) + " sequences";
    if (step_index) {
      throw StepError(*step_index, msg);
    }
    throw InvalidInputError(msg);
  }
  g.combined_scores = combine_scores(g.base_logprobs, g.class_probs, config.mode,
                                     config.alpha, config.prob_clamp_epsilon);

  // Top-k of the combined scores; ties break by ascending token id, not by
  // position in the candidate list.
  const int k_eff = std::min<int>(config.top_k, j_eff);
  std::vector<std::size_t> pos(g.candidate_ids.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  auto by_combined = [&g](std::size_t a, std::size_t b) {
    const double sa = g.combined_scores[a];
    const double sb = g.combined_scores[b];
    return sa > sb || (sa == sb && g.candidate_ids[a] < g.candidate_ids[b]);
  };
  std::partial_sort(pos.begin(), pos.begin() + k_eff, pos.end(), by_combined);
  pos.resize(static_cast<std::size_t>(k_eff));

  std::vector<double> kept_scores;
  kept_scores.reserve(pos.size());
  g.dist.ids.reserve(pos.size());
  for (std::size_t p : pos) {
    g.dist.ids.push_back(g.candidate_ids[p]);
    kept_scores.push_back(g.combined_scores[p]);
  }
  g.dist.probs = softmax_over(kept_scores);
  return g;
}

}  // namespace detail

/// One guided step from scratch: base log-probs at the configured
/// temperature, top-j truncation, one batched scorer call over the extended
/// sequences, score combination, then a renormalized top-k distribution.
/// prompt_len marks how many leading prefix tokens are prompt, which only
/// matters when the config excludes the prompt from classifier input.
inline GuidedStep guided_step_distribution(const TokenSeq& prefix, std::size_t prompt_len,
                                           const LogitSource& lm,
                                           const AttributeScorer& scorer,
                                           const AttributeTarget& target,
                                           const GuidanceConfig& config) {
  config.validate();
  const std::vector<double> base_logprobs =
      log_softmax(lm.next_logits_one(prefix), config.temperature);
  return detail::guided_from_base(base_logprobs, prefix, prompt_len, scorer, target,
                                  config, std::nullopt);
}

struct StepOutcome {
  TokenId token = 0;
  StepTrace trace;
};

/// One sampling step. Entropy is computed on the full base distribution
/// before any truncation; exactly one rng value is consumed per step
/// regardless of the guided/unguided branch, keeping runs seed-comparable.
inline StepOutcome caif_step(const TokenSeq& prefix, std::size_t prompt_len,
                             const LogitSource& lm, const AttributeScorer& scorer,
                             const AttributeTarget& target, const GuidanceConfig& config,
                             int step_index, RandomStream& rng) {
  const std::vector<double> base_logprobs =
      log_softmax(lm.next_logits_one(prefix), config.temperature);
  const double entropy = entropy_nats(base_logprobs);
  const bool guided = should_guide(config.criterion, step_index, entropy);
  const double u = rng.next_unit();

  StepOutcome out;
  out.trace.step_index = step_index;
  out.trace.entropy_nats = entropy;
  out.trace.guided = guided;

  if (guided) {
    GuidedStep g = detail::guided_from_base(base_logprobs, prefix, prompt_len, scorer,
                                            target, config, step_index);
    const std::size_t pick = detail::inverse_cdf_index(g.dist.probs, u);
    out.token = g.dist.ids[pick];
    out.trace.candidate_ids = std::move(g.candidate_ids);
    out.trace.base_logprobs = std::move(g.base_logprobs);
    out.trace.class_probs = std::move(g.class_probs);
    out.trace.combined_scores = std::move(g.combined_scores);
  } else {
    const int k_eff = static_cast<int>(std::min<std::size_t>(
        static_cast<std::size_t>(config.top_k), base_logprobs.size()));
    std::vector<TokenId> candidates = top_m(base_logprobs, k_eff);
    std::vector<double> kept;
    kept.reserve(candidates.size());
    for (TokenId id : candidates) {
      kept.push_back(base_logprobs[static_cast<std::size_t>(id)]);
    }
    const std::vector<double> probs = detail::softmax_over(kept);
    const std::size_t pick = detail::inverse_cdf_index(probs, u);
    out.token = candidates[pick];
    out.trace.candidate_ids = std::move(candidates);
    out.trace.base_logprobs = std::move(kept);
  }
  out.trace.sampled_id = out.token;
  return out;
}

/// Sample a continuation until EOS or max_new_tokens. Deterministic given
/// (seed, config, models). A step error aborts the run and surfaces the
/// partial record via GenerationAborted.
inline GenerationRecord generate(const TokenSeq& prompt, const LogitSource& lm,
                                 const AttributeScorer& scorer,
                                 const AttributeTarget& target,
                                 const GuidanceConfig& config, std::uint64_t seed) {
  config.validate();
  target.validate();
  if (!lm.vocabulary().contains_ids(prompt)) {
    throw InvalidInputError("generate: prompt id out of range for the model vocabulary");
  }

  GenerationRecord rec;
  rec.prompt = prompt;
  rec.seed = seed;
  rec.config = config;
  rec.stopped_by = StopReason::kMaxTokens;

  RandomStream rng(seed);
  TokenSeq prefix = prompt;
  for (int step = 0; step < config.max_new_tokens; ++step) {
    try {
      StepOutcome out =
          caif_step(prefix, prompt.size(), lm, scorer, target, config, step, rng);
      rec.continuation.push_back(out.token);
      rec.traces.push_back(std::move(out.trace));
      prefix.push_back(out.token);
    } catch (const StepError& e) {
      throw GenerationAborted(std::move(rec), e);
    }
    if (rec.continuation.back() == lm.vocabulary().eos_id()) {
      rec.stopped_by = StopReason::kEos;
      break;
    }
  }
  return rec;
}

}  // namespace caif
