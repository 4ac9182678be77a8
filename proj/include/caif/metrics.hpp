#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "caif/core.hpp"
#include "caif/models.hpp"

namespace caif {

/// Perplexity of a continuation under an evaluation model, conditioning on
/// the prompt: exp(-mean ln p(token)). The prompt itself is not scored.
inline double perplexity(const LogitSource& eval_lm, const TokenSeq& prompt,
                         const TokenSeq& continuation) {
  if (continuation.empty()) {
    throw InvalidInputError("perplexity: empty continuation");
  }
  const Vocabulary& vocab = eval_lm.vocabulary();
  if (!vocab.contains_ids(prompt) || !vocab.contains_ids(continuation)) {
    throw InvalidInputError("perplexity: token id out of range for eval model");
  }
  TokenSeq prefix = prompt;
  double sum_logprob = 0.0;
  for (TokenId token : continuation) {
    const std::vector<double> lp = log_softmax(eval_lm.next_logits_one(prefix), 1.0);
    sum_logprob += lp[static_cast<std::size_t>(token)];
    prefix.push_back(token);
  }
  return std::exp(-sum_logprob / static_cast<double>(continuation.size()));
}

struct DistinctN {
  double pct = 0.0;
  bool degenerate = false;  // no sequence was long enough to carry an n-gram
};

/// Distinct n-grams pooled across the given continuations, normalized by the
/// length: 100 * |distinct n-grams| / total tokens pooled.
inline DistinctN distinct_n(std::span<const TokenSeq> continuations, int n) {
  if (n < 1) {
    throw InvalidInputError("distinct_n: n must be >= 1");
  }
  std::set<TokenSeq> seen;
  std::size_t total_tokens = 0;
  bool any_long_enough = false;
  for (const TokenSeq& seq : continuations) {
    total_tokens += seq.size();
    if (static_cast<int>(seq.size()) < n) {
      continue;
    }
    any_long_enough = true;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
      seen.insert(TokenSeq(seq.begin() + static_cast<std::ptrdiff_t>(i),
                           seq.begin() + static_cast<std::ptrdiff_t>(i) + n));
    }
  }
  DistinctN out;
  if (!any_long_enough) {
    out.degenerate = true;
    return out;
  }
  out.pct =
      100.0 * static_cast<double>(seen.size()) / static_cast<double>(total_tokens);
  return out;
}

struct AttributeStats {
  double mean_pct = 0.0;  // mean score over all samples, as a percentage
  double max_pct = 0.0;   // mean over prompts of the max score per prompt
  double prob_pct = 0.0;  // share of prompts with any score > threshold
  // positiveness: mean over prompts of the per-prompt share of scores > threshold
  double positive_rate_pct = 0.0;
};

/// scores_per_prompt[i] holds the classifier scores (in [0,1]) of the
/// samples generated for prompt i.
inline AttributeStats attribute_stats(
    const std::vector<std::vector<double>>& scores_per_prompt,
    double threshold = 0.5) {
  if (scores_per_prompt.empty()) {
    throw InvalidInputError("attribute_stats: no prompts");
  }
  if (!std::isfinite(threshold)) {
    throw InvalidInputError("attribute_stats: threshold must be finite");
  }
  double sum = 0.0;
  double sum_of_max = 0.0;
  double sum_of_row_rates = 0.0;
  std::size_t total = 0;
  std::size_t prompts_hit = 0;
  for (const std::vector<double>& row : scores_per_prompt) {
    if (row.empty()) {
      throw InvalidInputError("attribute_stats: prompt with no samples");
    }
    double row_max = 0.0;
    std::size_t row_positives = 0;
    for (double s : row) {
      if (!(s >= 0.0 && s <= 1.0)) {
        throw InvalidInputError("attribute_stats: score outside [0,1]");
      }
      sum += s;
      row_max = std::max(row_max, s);
      if (s > threshold) {
        ++row_positives;
      }
      ++total;
    }
    sum_of_max += row_max;
    sum_of_row_rates +=
        static_cast<double>(row_positives) / static_cast<double>(row.size());
    if (row_positives > 0) {
      ++prompts_hit;
    }
  }
  const double num_prompts = static_cast<double>(scores_per_prompt.size());
  AttributeStats out;
  out.mean_pct = 100.0 * sum / static_cast<double>(total);
  out.max_pct = 100.0 * sum_of_max / num_prompts;
  out.prob_pct = 100.0 * static_cast<double>(prompts_hit) / num_prompts;
  out.positive_rate_pct = 100.0 * sum_of_row_rates / num_prompts;
  return out;
}

/// Pool of per-step entropies with a fixed-width histogram for reporting.
struct EntropyProfile {
  std::vector<double> samples_sorted;  // ascending
  std::vector<std::int64_t> pdf_counts;
  double bin_lo = 0.0;
  double bin_hi = 0.0;

  static EntropyProfile from_samples(std::vector<double> samples, int num_bins = 20) {
    if (samples.empty()) {
      throw InvalidInputError("EntropyProfile: no samples");
    }
    if (num_bins < 1) {
      throw InvalidInputError("EntropyProfile: num_bins must be >= 1");
    }
    for (double s : samples) {
      if (!std::isfinite(s)) {
        throw InvalidInputError("EntropyProfile: non-finite sample");
      }
    }
    std::sort(samples.begin(), samples.end());
    EntropyProfile p;
    p.bin_lo = samples.front();
    p.bin_hi = samples.back();
    p.pdf_counts.assign(static_cast<std::size_t>(num_bins), 0);
    const double width = (p.bin_hi - p.bin_lo) / num_bins;
    for (double s : samples) {
      std::size_t bin = 0;
      if (width > 0.0) {
        bin = std::min(static_cast<std::size_t>((s - p.bin_lo) / width),
                       static_cast<std::size_t>(num_bins - 1));
      }
      ++p.pdf_counts[bin];
    }
    p.samples_sorted = std::move(samples);
    return p;
  }

  /// Fraction of samples strictly above the threshold, i.e. the fraction of
  /// steps an Entropy(threshold) criterion would guide.
  double fraction_above(double threshold) const {
    const auto it = std::upper_bound(samples_sorted.begin(), samples_sorted.end(),
                                     threshold);
    return static_cast<double>(samples_sorted.end() - it) /
           static_cast<double>(samples_sorted.size());
  }
};

/// Smallest recorded entropy e such that the fraction of samples above e is
/// at most guided_fraction. guided_fraction = 1 means "guide everything",
/// for which 0.0 is returned (every recorded entropy is positive in
/// practice, and Entropy(0) guides any step with nonzero entropy).
inline double entropy_quantile_threshold(const EntropyProfile& profile,
                                         double guided_fraction) {
  if (!(guided_fraction >= 0.0 && guided_fraction <= 1.0)) {
    throw InvalidInputError("entropy_quantile_threshold: fraction must be in [0,1]");
  }
  if (guided_fraction == 1.0) {
    return 0.0;
  }
  const std::vector<double>& s = profile.samples_sorted;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i + 1 < s.size() && s[i + 1] == s[i]) {
      continue;  // evaluate each distinct value once, at its last occurrence
    }
    if (profile.fraction_above(s[i]) <= guided_fraction) {
      return s[i];
    }
  }
  return s.back();
}

struct MetricsReport {
  double ppl = 0.0;
  std::map<int, double> dist_n;  // n -> pooled distinct-n percentage
  double attr_mean_pct = 0.0;
  double attr_max_pct = 0.0;
  double attr_prob_pct = 0.0;
  int num_prompts = 0;
  int samples_per_prompt = 0;
};

/// Fixed-width text rendering in the shape of the usual results tables.
inline std::string render_report(const MetricsReport& r, const std::string& label) {
  char buf[256];
  std::string out;
  out += "| sampling | PPL | mean attr | max attr | attr prob | dist-1 | dist-2 | dist-3 |\n";
  out += "|----------|-----|-----------|----------|-----------|--------|--------|--------|\n";
  auto cell = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return std::string(buf);
  };
  auto dist = [&r, &cell](int n) {
    const auto it = r.dist_n.find(n);
    return it == r.dist_n.end() ? std::string("-") : cell(it->second);
  };
  out += "| " + label + " | " + cell(r.ppl) + " | " + cell(r.attr_mean_pct) + " | " +
         cell(r.attr_max_pct) + " | " + cell(r.attr_prob_pct) + " | " + dist(1) +
         " | " + dist(2) + " | " + dist(3) + " |\n";
  return out;
}

}  // namespace caif
