#pragma once

// Brute-force reference distributions for the guided sampler. Everything
// here recomputes the math from the definitions (own log-softmax, own
// clamp-and-combine, no truncation) instead of reusing the sampler's code
// path, so agreement between the two is a real check and not a tautology.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "caif/core.hpp"
#include "caif/models.hpp"

namespace caif::oracle {

struct ExactDistribution {
  std::vector<double> probs;  // indexed by token id, sums to 1
};

namespace detail {

inline std::vector<double> reference_log_softmax(std::span<const double> logits,
                                                 double temperature) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    scaled[i] = logits[i] / temperature;
  }
  double mx = scaled[0];
  for (double v : scaled) {
    mx = std::max(mx, v);
  }
  double sum = 0.0;
  for (double v : scaled) {
    sum += std::exp(v - mx);
  }
  const double lse = mx + std::log(sum);
  for (double& v : scaled) {
    v -= lse;
  }
  return scaled;
}

inline double reference_combined(double base_logprob, double class_prob,
                                 GuidanceMode mode, double alpha, double eps) {
  const double p = std::min(std::max(class_prob, eps), 1.0 - eps);
  const double term =
      mode == GuidanceMode::kLogProb ? std::log(p) : std::log1p(-p);
  return base_logprob + alpha * term;
}

}  // namespace detail

/// Exact next-token distribution with no top-j/top-k truncation: every token
/// in the vocabulary is scored by the classifier and the combined scores are
/// renormalized over the whole vocabulary. Refuses vocabularies above 4096
/// tokens; the point is small exhaustive cases.
inline ExactDistribution exact_step_distribution(
    const TokenSeq& prefix, const LogitSource& lm, const AttributeScorer& scorer,
    const AttributeTarget& target, double alpha, GuidanceMode mode, double eps,
    double temperature = 1.0) {
  const Vocabulary& vocab = lm.vocabulary();
  if (vocab.size() > 4096) {
    throw InvalidInputError(
        "exact_step_distribution: vocabulary too large to enumerate (> 4096)");
  }
  if (!(eps > 0.0 && eps < 0.5)) {
    throw InvalidInputError("exact_step_distribution: eps must be in (0, 0.5)");
  }
  if (!(temperature > 0.0)) {
    throw InvalidInputError("exact_step_distribution: temperature must be > 0");
  }

  const std::vector<double> base =
      detail::reference_log_softmax(lm.next_logits_one(prefix), temperature);

  std::vector<TokenSeq> extended;
  extended.reserve(vocab.size());
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    TokenSeq seq = prefix;
    seq.push_back(static_cast<TokenId>(t));
    extended.push_back(std::move(seq));
  }
  const std::vector<double> class_probs = scorer.score_batch(extended, target);
  if (class_probs.size() != vocab.size()) {
    throw InvalidInputError("exact_step_distribution: scorer batch size mismatch");
  }

  std::vector<double> combined(vocab.size());
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    combined[t] =
        detail::reference_combined(base[t], class_probs[t], mode, alpha, eps);
  }
  double mx = combined[0];
  for (double v : combined) {
    mx = std::max(mx, v);
  }
  double z = 0.0;
  for (double v : combined) {
    z += std::exp(v - mx);
  }
  ExactDistribution out;
  out.probs.resize(vocab.size());
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    out.probs[t] = std::exp(combined[t] - mx) / z;
  }
  return out;
}

namespace detail {

inline void enumerate_sequences(const TokenSeq& prefix, const TokenSeq& continuation,
                                const LogitSource& lm, const AttributeScorer& scorer,
                                const AttributeTarget& target, double alpha,
                                GuidanceMode mode, double eps, double temperature,
                                int horizon, double log_mass,
                                std::map<TokenSeq, double>& out) {
  const ExactDistribution step = exact_step_distribution(
      prefix, lm, scorer, target, alpha, mode, eps, temperature);
  const TokenId eos = lm.vocabulary().eos_id();
  for (std::size_t t = 0; t < step.probs.size(); ++t) {
    if (step.probs[t] <= 0.0) {
      continue;
    }
    const double next_log_mass = log_mass + std::log(step.probs[t]);
    TokenSeq next_cont = continuation;
    next_cont.push_back(static_cast<TokenId>(t));
    const bool terminal =
        static_cast<TokenId>(t) == eos || static_cast<int>(next_cont.size()) == horizon;
    if (terminal) {
      out[next_cont] += std::exp(next_log_mass);
    } else {
      TokenSeq next_prefix = prefix;
      next_prefix.push_back(static_cast<TokenId>(t));
      enumerate_sequences(next_prefix, next_cont, lm, scorer, target, alpha, mode,
                          eps, temperature, horizon, next_log_mass, out);
    }
  }
}

}  // namespace detail

/// Exact distribution over whole continuations of at most `horizon` tokens:
/// a continuation ends at EOS or at the horizon, and its probability is the
/// product of exact per-step probabilities (accumulated in log space). The
/// result sums to 1. Refuses when |V|^horizon exceeds 1e6.
inline std::map<TokenSeq, double> exact_sequence_distribution(
    const TokenSeq& prompt, const LogitSource& lm, const AttributeScorer& scorer,
    const AttributeTarget& target, double alpha, GuidanceMode mode, double eps,
    int horizon, double temperature = 1.0) {
  if (horizon < 1) {
    throw InvalidInputError("exact_sequence_distribution: horizon must be >= 1");
  }
  const double paths =
      std::pow(static_cast<double>(lm.vocabulary().size()), horizon);
  if (paths > 1e6) {
    throw InvalidInputError(
        "exact_sequence_distribution: |V|^horizon exceeds 1e6 paths");
  }
  std::map<TokenSeq, double> out;
  detail::enumerate_sequences(prompt, {}, lm, scorer, target, alpha, mode, eps,
                              temperature, horizon, 0.0, out);
  return out;
}

}  // namespace caif::oracle
