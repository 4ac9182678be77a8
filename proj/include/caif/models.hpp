#pragma once

#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caif/core.hpp"

namespace caif {

/// Next-token logit model. Implementations are immutable after construction:
/// the same prefix always yields the same row, and rows are finite.
class LogitSource {
 public:
  virtual ~LogitSource() = default;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::vector<std::vector<double>> next_logits(
      std::span<const TokenSeq> prefix_batch) const = 0;

  std::vector<double> next_logits_one(const TokenSeq& prefix) const {
    return next_logits(std::span<const TokenSeq>(&prefix, 1)).front();
  }
};

/// Sequence attribute classifier: probability in [0,1] per sequence.
/// Same input always yields the same output.
class AttributeScorer {
 public:
  virtual ~AttributeScorer() = default;
  virtual std::vector<double> score_batch(std::span<const TokenSeq> sequences,
                                          const AttributeTarget& target) const = 0;

  double score_one(const TokenSeq& seq, const AttributeTarget& target) const {
    return score_batch(std::span<const TokenSeq>(&seq, 1), target).front();
  }
};

inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw InvalidInputError("cannot open file: " + path);
  }
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<std::string> toks;
    std::string tok;
    while (ss >> tok) {
      toks.push_back(tok);
    }
    if (!toks.empty()) {
      lines.push_back(std::move(toks));
    }
  }
  return lines;
}

/// Add-k smoothed trigram model over whitespace tokens. Sequences are counted
/// with two leading BOS and one trailing EOS, so step 0 has a well-defined
/// context. p(t|a,b) = (count(a,b,t)+k)/(total(a,b)+k*|V|).
class TrigramLM final : public LogitSource {
 public:
  static TrigramLM train(const std::vector<std::vector<std::string>>& corpus,
                         double smoothing_k) {
    if (corpus.empty()) {
      throw InvalidInputError("train_trigram: empty corpus");
    }
    if (!(smoothing_k >= 0.0) || !std::isfinite(smoothing_k)) {
      throw InvalidInputError("train_trigram: smoothing_k must be >= 0");
    }
    std::vector<std::string> tokens = {"<bos>", "<eos>"};
    std::unordered_map<std::string, TokenId> index = {{"<bos>", 0}, {"<eos>", 1}};
    for (const auto& line : corpus) {
      for (const auto& tok : line) {
        if (index.emplace(tok, static_cast<TokenId>(tokens.size())).second) {
          tokens.push_back(tok);
        }
      }
    }
    TrigramLM lm(Vocabulary(std::move(tokens), /*bos_id=*/0, /*eos_id=*/1), smoothing_k);
    for (const auto& line : corpus) {
      TokenSeq padded = {lm.vocab_.bos_id(), lm.vocab_.bos_id()};
      for (const auto& tok : line) {
        padded.push_back(*lm.vocab_.find(tok));
      }
      padded.push_back(lm.vocab_.eos_id());
      for (std::size_t i = 2; i < padded.size(); ++i) {
        const std::uint64_t ctx = pack(padded[i - 2], padded[i - 1]);
        lm.counts_[ctx][padded[i]] += 1.0;
        lm.totals_[ctx] += 1.0;
      }
    }
    return lm;
  }

  static TrigramLM train_file(const std::string& path, double smoothing_k) {
    return train(read_token_lines(path), smoothing_k);
  }

  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<std::vector<double>> next_logits(
      std::span<const TokenSeq> prefix_batch) const override {
    std::vector<std::vector<double>> rows;
    rows.reserve(prefix_batch.size());
    for (const auto& prefix : prefix_batch) {
      if (!vocab_.contains_ids(prefix)) {
        throw InvalidInputError("TrigramLM: prefix id out of range");
      }
      rows.push_back(context_logits(context_of(prefix)));
    }
    return rows;
  }

  double smoothing_k() const { return smoothing_k_; }

 private:
  TrigramLM(Vocabulary vocab, double smoothing_k)
      : vocab_(std::move(vocab)), smoothing_k_(smoothing_k) {}

  static std::uint64_t pack(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::uint64_t context_of(const TokenSeq& prefix) const {
    const TokenId a = prefix.size() >= 2 ? prefix[prefix.size() - 2] : vocab_.bos_id();
    const TokenId b = !prefix.empty() ? prefix.back() : vocab_.bos_id();
    return pack(a, b);
  }

  // Unnormalized log counts; log_softmax recovers the add-k distribution.
  // An unseen context with smoothing degenerates to the uniform row.
  std::vector<double> context_logits(std::uint64_t ctx) const {
    const auto n = static_cast<std::size_t>(vocab_.size());
    std::vector<double> row(n, smoothing_k_ > 0.0 ? std::log(smoothing_k_) : kLogZero);
    auto it = counts_.find(ctx);
    if (it == counts_.end()) {
      if (smoothing_k_ == 0.0) {
        // No observations and no smoothing mass: fall back to uniform.
        std::fill(row.begin(), row.end(), 0.0);
      }
      return row;
    }
    for (const auto& [tok, count] : it->second) {
      row[static_cast<std::size_t>(tok)] = std::log(count + smoothing_k_);
    }
    return row;
  }

  Vocabulary vocab_;
  double smoothing_k_;
  std::unordered_map<std::uint64_t, std::unordered_map<TokenId, double>> counts_;
  std::unordered_map<std::uint64_t, double> totals_;
};

namespace detail {

inline bool is_id_key(const std::string& key) {
  if (key.empty()) return true;  // empty prefix
  for (char c : key) {
    if (c != ' ' && (c < '0' || c > '9')) return false;
  }
  return true;
}

inline Vocabulary vocab_from_fixture(const nlohmann::json& j, std::size_t row_len) {
  std::vector<std::string> tokens;
  if (j.contains("_tokens")) {
    tokens = j.at("_tokens").get<std::vector<std::string>>();
  } else {
    tokens.reserve(row_len);
    for (std::size_t i = 0; i < row_len; ++i) {
      tokens.push_back("t" + std::to_string(i));
    }
  }
  const auto n = static_cast<TokenId>(tokens.size());
  const TokenId bos = j.value("_bos_id", n >= 2 ? n - 2 : 0);
  const TokenId eos = j.value("_eos_id", n - 1);
  return Vocabulary(std::move(tokens), bos, eos);
}

}  // namespace detail

/// Exact lookup model: maps a full prefix to a stored probability row.
/// Fixture files are JSON objects keyed by space-joined id strings; keys
/// starting with '_' are metadata ("_tokens", "_bos_id", "_eos_id",
/// "_default" for a fallback row). Unstored prefixes without a fallback
/// are errors.
class TableLM final : public LogitSource {
 public:
  TableLM(Vocabulary vocab, std::unordered_map<std::string, std::vector<double>> rows,
          std::optional<std::vector<double>> default_row = std::nullopt)
      : vocab_(std::move(vocab)), rows_(std::move(rows)),
        default_row_(std::move(default_row)) {
    for (const auto& [key, row] : rows_) {
      validate_row(key, row);
    }
    if (default_row_) {
      validate_row("_default", *default_row_);
    }
  }

  static TableLM load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
      throw InvalidInputError("cannot open fixture: " + path);
    }
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInputError("TableLM fixture parse error in " + path + ": " + e.what());
    }
    return from_json(j, path);
  }

  static TableLM from_json(const nlohmann::json& j, const std::string& origin = "<json>") {
    if (!j.is_object()) {
      throw InvalidInputError("TableLM fixture must be a JSON object: " + origin);
    }
    std::unordered_map<std::string, std::vector<double>> rows;
    std::optional<std::vector<double>> default_row;
    std::size_t row_len = 0;
    for (const auto& [key, value] : j.items()) {
      if (key == "_default") {
        default_row = value.get<std::vector<double>>();
        row_len = default_row->size();
        continue;
      }
      if (!key.empty() && key.front() == '_') continue;  // metadata
      if (!detail::is_id_key(key)) {
        throw InvalidInputError("TableLM fixture key is not a space-joined id string: '" +
                                key + "'");
      }
      auto row = value.get<std::vector<double>>();
      row_len = row.size();
      rows.emplace(key, std::move(row));
    }
    if (row_len == 0) {
      throw InvalidInputError("TableLM fixture has no rows: " + origin);
    }
    return TableLM(detail::vocab_from_fixture(j, row_len), std::move(rows),
                   std::move(default_row));
  }

  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<std::vector<double>> next_logits(
      std::span<const TokenSeq> prefix_batch) const override {
    std::vector<std::vector<double>> out;
    out.reserve(prefix_batch.size());
    for (const auto& prefix : prefix_batch) {
      const auto& row = row_for(prefix);
      std::vector<double> logits(row.size());
      for (std::size_t i = 0; i < row.size(); ++i) {
        logits[i] = row[i] > 0.0 ? std::log(row[i]) : kLogZero;
      }
      out.push_back(std::move(logits));
    }
    return out;
  }

  const std::vector<double>& row_for(const TokenSeq& prefix) const {
    auto it = rows_.find(join_ids(prefix));
    if (it != rows_.end()) {
      return it->second;
    }
    if (default_row_) {
      return *default_row_;
    }
    throw InvalidInputError("TableLM: no row stored for prefix '" + join_ids(prefix) + "'");
  }

 private:
  void validate_row(const std::string& key, const std::vector<double>& row) const {
    if (row.size() != static_cast<std::size_t>(vocab_.size())) {
      throw InvalidInputError("TableLM row '" + key + "' has length " +
                              std::to_string(row.size()) + ", expected " +
                              std::to_string(vocab_.size()));
    }
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw InvalidInputError("TableLM row '" + key + "' has a negative or non-finite entry");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw InvalidInputError("TableLM row '" + key + "' sums to " + std::to_string(sum) +
                              ", expected 1");
    }
  }

  Vocabulary vocab_;
  std::unordered_map<std::string, std::vector<double>> rows_;
  std::optional<std::vector<double>> default_row_;
};

/// Exact lookup scorer: maps a full sequence to a stored attribute
/// probability. Same fixture conventions as TableLM, with scalar values.
class TableScorer final : public AttributeScorer {
 public:
  explicit TableScorer(std::unordered_map<std::string, double> probs,
                       std::optional<double> default_prob = std::nullopt)
      : probs_(std::move(probs)), default_prob_(default_prob) {
    for (const auto& [key, p] : probs_) {
      validate_prob(key, p);
    }
    if (default_prob_) {
      validate_prob("_default", *default_prob_);
    }
  }

  static TableScorer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
      throw InvalidInputError("cannot open fixture: " + path);
    }
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInputError("TableScorer fixture parse error in " + path + ": " + e.what());
    }
    return from_json(j, path);
  }

  static TableScorer from_json(const nlohmann::json& j,
                               const std::string& origin = "<json>") {
    if (!j.is_object()) {
      throw InvalidInputError("TableScorer fixture must be a JSON object: " + origin);
    }
    std::unordered_map<std::string, double> probs;
    std::optional<double> default_prob;
    for (const auto& [key, value] : j.items()) {
      if (key == "_default") {
        default_prob = value.get<double>();
        continue;
      }
      if (!key.empty() && key.front() == '_') continue;
      if (!detail::is_id_key(key)) {
        throw InvalidInputError("TableScorer fixture key is not a space-joined id string: '" +
                                key + "'");
      }
      probs.emplace(key, value.get<double>());
    }
    if (probs.empty() && !default_prob) {
      throw InvalidInputError("TableScorer fixture has no entries: " + origin);
    }
    return TableScorer(std::move(probs), default_prob);
  }

  std::vector<double> score_batch(std::span<const TokenSeq> sequences,
                                  const AttributeTarget&) const override {
    std::vector<double> out;
    out.reserve(sequences.size());
    for (const auto& seq : sequences) {
      auto it = probs_.find(join_ids(seq));
      if (it != probs_.end()) {
        out.push_back(it->second);
      } else if (default_prob_) {
        out.push_back(*default_prob_);
      } else {
        throw InvalidInputError("TableScorer: no score stored for sequence '" +
                                join_ids(seq) + "'");
      }
    }
    return out;
  }

 private:
  static void validate_prob(const std::string& key, double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw InvalidInputError("TableScorer entry '" + key + "' is outside [0,1]");
    }
  }

  std::unordered_map<std::string, double> probs_;
  std::optional<double> default_prob_;
};

/// sigmoid(w0 + w1*m) where m counts flagged-token occurrences in the scored
/// sequence. Monotone non-decreasing in m for w1 > 0.
class LexiconScorer final : public AttributeScorer {
 public:
  explicit LexiconScorer(std::unordered_set<TokenId> flagged_ids, double w0 = -2.0,
                         double w1 = 2.0)
      : flagged_(std::move(flagged_ids)), w0_(w0), w1_(w1) {}

  /// One flagged token string per line; words absent from the vocabulary are
  /// skipped (they can never occur in a scored sequence).
  static LexiconScorer load(const std::string& path, const Vocabulary& vocab,
                            double w0 = -2.0, double w1 = 2.0) {
    std::ifstream in(path);
    if (!in) {
      throw InvalidInputError("cannot open lexicon: " + path);
    }
    std::unordered_set<TokenId> flagged;
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) {
        if (auto id = vocab.find(tok)) {
          flagged.insert(*id);
        }
      }
    }
    return LexiconScorer(std::move(flagged), w0, w1);
  }

  std::vector<double> score_batch(std::span<const TokenSeq> sequences,
                                  const AttributeTarget&) const override {
    std::vector<double> out;
    out.reserve(sequences.size());
    for (const auto& seq : sequences) {
      int m = 0;
      for (TokenId id : seq) {
        m += flagged_.count(id) ? 1 : 0;
      }
      out.push_back(sigmoid(w0_ + w1_ * m));
    }
    return out;
  }

  const std::unordered_set<TokenId>& flagged_ids() const { return flagged_; }

 private:
  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  std::unordered_set<TokenId> flagged_;
  double w0_;
  double w1_;
};

/// Re-express a token sequence from one vocabulary in another via token
/// strings. Fails if a token has no counterpart.
inline TokenSeq remap_ids(const TokenSeq& seq, const Vocabulary& from,
                          const Vocabulary& to) {
  TokenSeq out;
  out.reserve(seq.size());
  for (TokenId id : seq) {
    const std::string& tok = from.token(id);
    auto mapped = to.find(tok);
    if (!mapped) {
      throw InvalidInputError("remap_ids: token '" + tok + "' not in target vocabulary");
    }
    out.push_back(*mapped);
  }
  return out;
}

}  // namespace caif
