#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include <json.hpp>

#include "caif/models.hpp"
#include "caif/oracle.hpp"
#include "caif/sampler.hpp"

using namespace caif;
using nlohmann::json;

namespace {

bool near(double a, double b, double eps = 1e-12) { return std::abs(a - b) <= eps; }

const AttributeTarget kTarget{"flagged", Polarity::kAvoid};

/// Large vocabulary, never answers: the guards must fire first.
class GuardProbeLM final : public LogitSource {
 public:
  explicit GuardProbeLM(int vocab_size) : vocab_(make_tokens(vocab_size), 0, 1) {}

  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<std::vector<double>> next_logits(
      std::span<const TokenSeq>) const override {
    throw std::logic_error("model must not be queried when a guard applies");
  }

 private:
  static std::vector<std::string> make_tokens(int n) {
    std::vector<std::string> t;
    t.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      t.push_back("t" + std::to_string(i));
    }
    return t;
  }

  Vocabulary vocab_;
};

}  // namespace

TEST_CASE("exact_step_distribution two-token pins") {
  const TableLM lm = TableLM::from_json(json{{"_default", {0.5, 0.5}}});
  const TableScorer scorer = TableScorer::from_json(json{{"0", 0.9}, {"1", 0.1}});

  const auto avoid = oracle::exact_step_distribution({}, lm, scorer, kTarget, -1.0,
                                                     GuidanceMode::kLogProb, 1e-7);
  REQUIRE(near(avoid.probs[0], 0.1, 1e-12));
  REQUIRE(near(avoid.probs[1], 0.9, 1e-12));

  const auto attract = oracle::exact_step_distribution({}, lm, scorer, kTarget, 1.0,
                                                       GuidanceMode::kLogProb, 1e-7);
  REQUIRE(near(attract.probs[0], 0.9, 1e-12));
  REQUIRE(near(attract.probs[1], 0.1, 1e-12));

  const auto neutral = oracle::exact_step_distribution({}, lm, scorer, kTarget, 0.0,
                                                       GuidanceMode::kLogProb, 1e-7);
  REQUIRE(near(neutral.probs[0], 0.5, 1e-12));
  REQUIRE(near(neutral.probs[1], 0.5, 1e-12));
}

TEST_CASE("exact_step_distribution agrees with the sampler at full width") {
  const TableLM lm = TableLM::from_json(json{{"_default", {0.45, 0.25, 0.2, 0.1}}});
  const TableScorer scorer = TableScorer::from_json(json{
      {"1 0", 0.9}, {"1 1", 0.2}, {"1 2", 0.5}, {"1 3", 0.7}});

  for (const double alpha : {-3.0, 0.0, 2.0}) {
    for (const GuidanceMode mode :
         {GuidanceMode::kLogProb, GuidanceMode::kLogOneMinusProb}) {
      for (const double temperature : {1.0, 2.0}) {
        GuidanceConfig cfg;
        cfg.alpha = alpha;
        cfg.mode = mode;
        cfg.temperature = temperature;
        cfg.top_j = 4;
        cfg.top_k = 4;

        const GuidedStep g =
            guided_step_distribution({1}, 0, lm, scorer, kTarget, cfg);
        const auto exact = oracle::exact_step_distribution(
            {1}, lm, scorer, kTarget, alpha, mode, cfg.prob_clamp_epsilon,
            temperature);

        std::vector<double> dense(4, 0.0);
        for (std::size_t i = 0; i < g.dist.ids.size(); ++i) {
          dense[static_cast<std::size_t>(g.dist.ids[i])] = g.dist.probs[i];
        }
        for (std::size_t t = 0; t < 4; ++t) {
          REQUIRE(near(dense[t], exact.probs[t], 1e-9));
        }
      }
    }
  }
}

TEST_CASE("exact_step_distribution guards") {
  const GuardProbeLM big(5000);
  const TableScorer scorer = TableScorer::from_json(json{{"_default", 0.5}});
  REQUIRE_THROWS_AS(oracle::exact_step_distribution({}, big, scorer, kTarget, -1.0,
                                                    GuidanceMode::kLogProb, 1e-7),
                    InvalidInputError);

  const TableLM lm = TableLM::from_json(json{{"_default", {0.5, 0.5}}});
  REQUIRE_THROWS_AS(oracle::exact_step_distribution({}, lm, scorer, kTarget, -1.0,
                                                    GuidanceMode::kLogProb, 0.0),
                    InvalidInputError);
  REQUIRE_THROWS_AS(oracle::exact_step_distribution({}, lm, scorer, kTarget, -1.0,
                                                    GuidanceMode::kLogProb, 0.7),
                    InvalidInputError);
  REQUIRE_THROWS_AS(
      oracle::exact_step_distribution({}, lm, scorer, kTarget, -1.0,
                                      GuidanceMode::kLogProb, 1e-7, /*temperature=*/0.0),
      InvalidInputError);
}

TEST_CASE("exact_sequence_distribution with a flat scorer is the base chain") {
  // eos is id 2; with a constant classifier the guidance cancels out.
  const TableLM lm = TableLM::from_json(json{{"_default", {0.5, 0.3, 0.2}}});
  const TableScorer scorer = TableScorer::from_json(json{{"_default", 0.4}});

  const auto dist = oracle::exact_sequence_distribution(
      {}, lm, scorer, kTarget, -5.0, GuidanceMode::kLogProb, 1e-7, /*horizon=*/2);

  // One eos-only path plus 2*3 two-token paths.
  REQUIRE(dist.size() == 7);
  REQUIRE(near(dist.at({2}), 0.2, 1e-12));
  REQUIRE(near(dist.at({0, 1}), 0.5 * 0.3, 1e-12));
  REQUIRE(near(dist.at({1, 2}), 0.3 * 0.2, 1e-12));

  double total = 0.0;
  for (const auto& [seq, p] : dist) {
    REQUIRE(p > 0.0);
    total += p;
  }
  REQUIRE(near(total, 1.0, 1e-9));
}

TEST_CASE("exact_sequence_distribution applies per-step guidance") {
  const TableLM lm = TableLM::from_json(json{{"_default", {0.5, 0.3, 0.2}}});
  const TableScorer scorer = TableScorer::from_json(json{
      {"0", 0.8}, {"1", 0.2}, {"2", 0.5},
      {"0 0", 0.3}, {"0 1", 0.3}, {"0 2", 0.9},
      {"1 0", 0.1}, {"1 1", 0.6}, {"1 2", 0.5}});
  const double alpha = -2.0;

  const auto dist = oracle::exact_sequence_distribution(
      {}, lm, scorer, kTarget, alpha, GuidanceMode::kLogProb, 1e-7, /*horizon=*/2);

  // Hand-computed q(x) = p(x) * c(x)^alpha, renormalized per step.
  const double w1_0 = 0.5 * std::pow(0.8, alpha);
  const double w1_1 = 0.3 * std::pow(0.2, alpha);
  const double w1_2 = 0.2 * std::pow(0.5, alpha);
  const double z1 = w1_0 + w1_1 + w1_2;

  const double w2_0 = 0.5 * std::pow(0.1, alpha);
  const double w2_1 = 0.3 * std::pow(0.6, alpha);
  const double w2_2 = 0.2 * std::pow(0.5, alpha);
  const double z2 = w2_0 + w2_1 + w2_2;

  REQUIRE(near(dist.at({1, 0}), (w1_1 / z1) * (w2_0 / z2), 1e-12));
  REQUIRE(near(dist.at({2}), w1_2 / z1, 1e-12));

  double total = 0.0;
  for (const auto& [seq, p] : dist) {
    total += p;
  }
  REQUIRE(near(total, 1.0, 1e-9));
}

TEST_CASE("exact_sequence_distribution guards") {
  const TableLM lm = TableLM::from_json(json{{"_default", {0.5, 0.5}}});
  const TableScorer scorer = TableScorer::from_json(json{{"_default", 0.5}});
  REQUIRE_THROWS_AS(
      oracle::exact_sequence_distribution({}, lm, scorer, kTarget, -1.0,
                                          GuidanceMode::kLogProb, 1e-7, 0),
      InvalidInputError);

  const GuardProbeLM wide(101);
  REQUIRE_THROWS_AS(
      oracle::exact_sequence_distribution({}, wide, scorer, kTarget, -1.0,
                                          GuidanceMode::kLogProb, 1e-7, 3),
      InvalidInputError);
}

TEST_CASE("temperature reaches the oracle's base distribution") {
  const TableLM lm = TableLM::from_json(json{{"_default", {0.7, 0.3}}});
  const TableScorer scorer = TableScorer::from_json(json{{"_default", 0.5}});
  const auto cold = oracle::exact_step_distribution({}, lm, scorer, kTarget, 0.0,
                                                    GuidanceMode::kLogProb, 1e-7, 1.0);
  const auto hot = oracle::exact_step_distribution({}, lm, scorer, kTarget, 0.0,
                                                   GuidanceMode::kLogProb, 1e-7, 8.0);
  REQUIRE(near(cold.probs[0], 0.7, 1e-12));
  REQUIRE(hot.probs[0] < cold.probs[0]);
  REQUIRE(hot.probs[0] > 0.5);
}
