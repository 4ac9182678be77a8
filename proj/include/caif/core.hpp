#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace caif {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

struct InvalidInputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Logit value standing in for ln(0); keeps model rows finite while
// underflowing to exactly zero probability after softmax.
inline constexpr double kLogZero = -1e9;

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 14695981039346656037ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Dense token inventory: ids are 0..size-1 in list order, with reserved
/// begin/end-of-sequence ids.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> tokens, TokenId bos_id, TokenId eos_id)
      : tokens_(std::move(tokens)), bos_id_(bos_id), eos_id_(eos_id) {
    if (tokens_.size() < 2) {
      throw InvalidInputError("Vocabulary: need at least 2 tokens");
    }
    if (bos_id_ == eos_id_ || bos_id_ < 0 || eos_id_ < 0 ||
        bos_id_ >= size() || eos_id_ >= size()) {
      throw InvalidInputError("Vocabulary: bos/eos ids must be distinct and in range");
    }
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!inserted) {
        throw InvalidInputError("Vocabulary: duplicate token '" + tokens_[i] + "'");
      }
    }
  }

  TokenId size() const { return static_cast<TokenId>(tokens_.size()); }
  TokenId bos_id() const { return bos_id_; }
  TokenId eos_id() const { return eos_id_; }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size()) {
      throw InvalidInputError("Vocabulary: token id out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? std::nullopt : std::optional<TokenId>(it->second);
  }

  bool contains_ids(const TokenSeq& seq) const {
    return std::all_of(seq.begin(), seq.end(),
                       [this](TokenId id) { return id >= 0 && id < size(); });
  }

  /// Order-sensitive hash over token strings plus the reserved ids. Two
  /// vocabularies with the same fingerprint are interchangeable on the wire.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& t : tokens_) {
      h = fnv1a64(t, h);
      h = fnv1a64(std::string_view("\x1f", 1), h);
    }
    h = fnv1a64(std::to_string(bos_id_), h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
    h = fnv1a64(std::to_string(eos_id_), h);
    return h;
  }

  std::string fingerprint_hex() const {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fingerprint();
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[h & 0xf];
      h >>= 4;
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId bos_id_;
  TokenId eos_id_;
};

enum class Polarity { kAvoid, kAttract };

/// Names the attribute a scorer reports on. Polarity is documentation;
/// the numeric steering direction comes from alpha's sign and the mode.
struct AttributeTarget {
  std::string class_label;
  Polarity polarity = Polarity::kAvoid;

  void validate() const {
    if (class_label.empty()) {
      throw InvalidInputError("AttributeTarget: class_label must be non-empty");
    }
  }
};

enum class GuidanceMode { kLogProb, kLogOneMinusProb };

struct StepCriterion {
  enum class Kind { kAlways, kPeriodic, kEntropy };

  Kind kind = Kind::kAlways;
  int period = 1;              // kPeriodic
  double threshold_nats = 0.0; // kEntropy

  static StepCriterion always() { return {}; }
  static StepCriterion periodic(int p) {
    StepCriterion c;
    c.kind = Kind::kPeriodic;
    c.period = p;
    return c;
  }
  static StepCriterion entropy(double threshold_nats) {
    StepCriterion c;
    c.kind = Kind::kEntropy;
    c.threshold_nats = threshold_nats;
    return c;
  }

  void validate() const {
    if (kind == Kind::kPeriodic && period < 1) {
      throw InvalidInputError("StepCriterion: period must be >= 1");
    }
    if (kind == Kind::kEntropy &&
        !(threshold_nats >= 0.0 && std::isfinite(threshold_nats))) {
      throw InvalidInputError("StepCriterion: entropy threshold must be >= 0");
    }
  }

  bool operator==(const StepCriterion&) const = default;
};

/// The full knob set of guided sampling. Defaults follow the detoxification
/// setup: alpha -5, top-j 100, top-k 20.
struct GuidanceConfig {
  double alpha = -5.0;
  int top_j = 100;
  int top_k = 20;
  GuidanceMode mode = GuidanceMode::kLogProb;
  StepCriterion criterion = StepCriterion::always();
  double temperature = 1.0;  // applied to base logits only
  int max_new_tokens = 20;
  bool include_prompt_in_classifier_input = true;
  double prob_clamp_epsilon = 1e-7;

  // top_j and top_k are clamped to the vocabulary size at use; validation
  // only requires 1 <= top_k <= top_j.
  void validate() const {
    if (!std::isfinite(alpha)) {
      throw InvalidInputError("GuidanceConfig: alpha must be finite");
    }
    if (top_k < 1 || top_j < 1 || top_k > top_j) {
      throw InvalidInputError("GuidanceConfig: need 1 <= top_k <= top_j");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw InvalidInputError("GuidanceConfig: temperature must be > 0");
    }
    if (max_new_tokens < 0) {
      throw InvalidInputError("GuidanceConfig: max_new_tokens must be >= 0");
    }
    if (!(prob_clamp_epsilon > 0.0 && prob_clamp_epsilon < 0.5)) {
      throw InvalidInputError("GuidanceConfig: prob_clamp_epsilon must be in (0, 0.5)");
    }
    criterion.validate();
  }

  bool operator==(const GuidanceConfig&) const = default;
};

namespace detail {

inline constexpr std::uint64_t kSplitMix64Gamma = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t splitmix64_scramble(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// SplitMix64 stream. next_unit() divides the raw 64-bit output by 2^64,
/// so any implementation of the same scheme reproduces identical samples
/// from identical seeds. Single-owner: clone via split(), never share.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += detail::kSplitMix64Gamma;
    return detail::splitmix64_scramble(state_);
  }

  double next_unit() { return static_cast<double>(next_u64()) * 0x1p-64; }

  RandomStream split(std::uint64_t stream_index) const {
    std::uint64_t s = detail::splitmix64_scramble(state_ + detail::kSplitMix64Gamma);
    s = detail::splitmix64_scramble(s + (stream_index + 1) * detail::kSplitMix64Gamma);
    return RandomStream(s);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// Deterministic per-sample seed from (base, prompt_index, sample_index);
/// execution order cannot change results.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = detail::splitmix64_scramble(base + detail::kSplitMix64Gamma);
  s = detail::splitmix64_scramble(s + (a + 1) * detail::kSplitMix64Gamma);
  s = detail::splitmix64_scramble(s + (b + 1) * detail::kSplitMix64Gamma);
  return s;
}

/// log softmax of logits/temperature, max-subtracted for stability.
inline std::vector<double> log_softmax(std::span<const double> logits,
                                       double temperature) {
  if (logits.empty()) {
    throw InvalidInputError("log_softmax: empty input");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidInputError("log_softmax: temperature must be finite and > 0");
  }
  for (double v : logits) {
    if (!std::isfinite(v)) {
      throw InvalidInputError("log_softmax: non-finite logit");
    }
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] / temperature;
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (double v : out) {
    sum += std::exp(v - mx);
  }
  const double lse = mx + std::log(sum);
  for (double& v : out) {
    v -= lse;
  }
  return out;
}

/// Shannon entropy in nats of a log-probability vector; 0*ln(0) counts as 0.
inline double entropy_nats(std::span<const double> logprobs) {
  if (logprobs.empty()) {
    throw InvalidInputError("entropy_nats: empty input");
  }
  double total = 0.0;
  for (double lp : logprobs) {
    total += std::exp(lp);
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw InvalidInputError("entropy_nats: input does not sum to 1 (got " +
                            std::to_string(total) + ")");
  }
  double h = 0.0;
  for (double lp : logprobs) {
    const double p = std::exp(lp);
    if (p > 0.0) {
      h -= p * lp;
    }
  }
  return h < 0.0 ? 0.0 : h;
}

/// Indices of the min(m, len) highest scores, score-descending, ties broken
/// by ascending index. Pure and deterministic.
inline std::vector<TokenId> top_m(std::span<const double> scores, int m) {
  if (m < 1) {
    throw InvalidInputError("top_m: m must be >= 1");
  }
  const auto n = static_cast<TokenId>(scores.size());
  std::vector<TokenId> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), TokenId{0});
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(m), idx.size());
  auto by_score = [&scores](TokenId a, TokenId b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take),
                    idx.end(), by_score);
  idx.resize(take);
  return idx;
}

inline std::string join_ids(const TokenSeq& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i > 0) out += ' ';
    out += std::to_string(seq[i]);
  }
  return out;
}

}  // namespace caif
