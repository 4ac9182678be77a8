#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "caif/models.hpp"

using namespace caif;
using nlohmann::json;

namespace {

bool near(double a, double b, double eps = 1e-12) { return std::abs(a - b) <= eps; }

std::vector<double> probs_of(const LogitSource& lm, const TokenSeq& prefix) {
  std::vector<double> lp = log_softmax(lm.next_logits_one(prefix), 1.0);
  for (double& v : lp) {
    v = std::exp(v);
  }
  return lp;
}

struct TempFile {
  std::filesystem::path path;

  explicit TempFile(const std::string& name, const std::string& contents) {
    path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << contents;
  }
  ~TempFile() { std::filesystem::remove(path); }
};

}  // namespace

TEST_CASE("read_token_lines splits and skips blanks") {
  TempFile f("caif_test_lines.txt", "a b  c\n\n  d\n");
  const auto lines = read_token_lines(f.path.string());
  REQUIRE(lines.size() == 2);
  REQUIRE(lines[0] == std::vector<std::string>{"a", "b", "c"});
  REQUIRE(lines[1] == std::vector<std::string>{"d"});
  REQUIRE_THROWS_AS(read_token_lines("/nonexistent/nope.txt"), InvalidInputError);
}

TEST_CASE("TrigramLM add-k probabilities") {
  // One line "a b a": vocab <bos>=0 <eos>=1 a=2 b=3, padded [0 0 2 3 2 1].
  const TrigramLM lm = TrigramLM::train({{"a", "b", "a"}}, 1.0);
  REQUIRE(lm.vocabulary().size() == 4);
  REQUIRE(lm.vocabulary().bos_id() == 0);
  REQUIRE(lm.vocabulary().eos_id() == 1);
  REQUIRE(lm.vocabulary().find("a") == TokenId{2});

  // Context (a, b) saw only "a": p = (1+1)/(1+4) = 0.4, rest 0.2.
  const std::vector<double> p = probs_of(lm, {2, 3});
  REQUIRE(near(p[2], 0.4));
  REQUIRE(near(p[0], 0.2));
  REQUIRE(near(p[1], 0.2));
  REQUIRE(near(p[3], 0.2));
}

TEST_CASE("TrigramLM unsmoothed is the MLE") {
  const TrigramLM lm = TrigramLM::train({{"a", "b", "a"}}, 0.0);
  const std::vector<double> p = probs_of(lm, {2, 3});
  REQUIRE(p[2] == 1.0);
  REQUIRE(p[0] == 0.0);
  REQUIRE(p[1] == 0.0);
  REQUIRE(p[3] == 0.0);

  // Unseen context has no mass anywhere: fall back to uniform.
  const std::vector<double> u = probs_of(lm, {3, 3});
  for (double v : u) {
    REQUIRE(near(v, 0.25));
  }
}

TEST_CASE("TrigramLM context handling") {
  const TrigramLM lm = TrigramLM::train({{"a", "b", "a"}}, 0.5);
  // Short prefixes are left-padded with BOS.
  REQUIRE(lm.next_logits_one({}) == lm.next_logits_one({0, 0}));
  REQUIRE(lm.next_logits_one({2}) == lm.next_logits_one({0, 2}));
  // Only the last two ids matter.
  REQUIRE(lm.next_logits_one({3, 3, 2, 3}) == lm.next_logits_one({2, 3}));

  const std::vector<TokenSeq> batch = {{2, 3}, {}, {2}};
  const auto rows = lm.next_logits(batch);
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0] == lm.next_logits_one({2, 3}));
  REQUIRE(rows[2] == lm.next_logits_one({2}));

  REQUIRE_THROWS_AS(lm.next_logits_one({99}), InvalidInputError);
  REQUIRE_THROWS_AS(lm.next_logits_one({-1}), InvalidInputError);
}

TEST_CASE("TrigramLM validation and vocab order") {
  REQUIRE_THROWS_AS(TrigramLM::train({}, 1.0), InvalidInputError);
  REQUIRE_THROWS_AS(TrigramLM::train({{"a"}}, -1.0), InvalidInputError);

  const TrigramLM lm = TrigramLM::train({{"b", "a"}, {"c"}}, 1.0);
  REQUIRE(lm.vocabulary().tokens() ==
          std::vector<std::string>{"<bos>", "<eos>", "b", "a", "c"});
}

TEST_CASE("TrigramLM trains from the toy corpus") {
  const TrigramLM lm = TrigramLM::train_file(std::string(CAIF_DATA_DIR) + "/toy/train.txt", 1.0);
  REQUIRE(lm.vocabulary().size() >= 10);
  REQUIRE(lm.vocabulary().bos_id() == 0);
  REQUIRE(lm.vocabulary().eos_id() == 1);
  REQUIRE(lm.vocabulary().find("the").has_value());
  REQUIRE(lm.vocabulary().find("sludge").has_value());
}

TEST_CASE("TableLM lookup and conversion to logits") {
  const json j = {
      {"_tokens", {"x", "y", "z"}},
      {"_bos_id", 0},
      {"_eos_id", 2},
      {"", {0.5, 0.25, 0.25}},
      {"1", {0.9, 0.0, 0.1}},
  };
  const TableLM lm = TableLM::from_json(j);
  REQUIRE(lm.vocabulary().size() == 3);
  REQUIRE(lm.vocabulary().token(1) == "y");

  const std::vector<double> p0 = probs_of(lm, {});
  REQUIRE(near(p0[0], 0.5));
  REQUIRE(near(p0[1], 0.25));

  // Zero probability maps to the log-zero sentinel, not -inf.
  const std::vector<double> row1 = lm.next_logits_one({1});
  REQUIRE(row1[1] == kLogZero);
  REQUIRE(near(std::exp(log_softmax(row1, 1.0)[1]), 0.0));

  REQUIRE_THROWS_AS(lm.next_logits_one({2}), InvalidInputError);
}

TEST_CASE("TableLM default row and synthesized vocab") {
  const json j = {
      {"", {0.7, 0.3}},
      {"_default", {0.5, 0.5}},
  };
  const TableLM lm = TableLM::from_json(j);
  // Without _tokens the vocab is synthesized as t0..t{n-1}, bos n-2, eos n-1.
  REQUIRE(lm.vocabulary().tokens() == std::vector<std::string>{"t0", "t1"});
  REQUIRE(lm.vocabulary().bos_id() == 0);
  REQUIRE(lm.vocabulary().eos_id() == 1);
  const std::vector<double> p = probs_of(lm, {0, 1});
  REQUIRE(near(p[0], 0.5));
}

TEST_CASE("TableLM fixture validation") {
  REQUIRE_THROWS_AS(TableLM::from_json(json::array()), InvalidInputError);
  REQUIRE_THROWS_AS(TableLM::from_json(json::object()), InvalidInputError);
  REQUIRE_THROWS_AS(TableLM::from_json(json{{"", {0.5, 0.6}}}), InvalidInputError);
  REQUIRE_THROWS_AS(TableLM::from_json(json{{"", {-0.5, 1.5}}}), InvalidInputError);
  REQUIRE_THROWS_AS(TableLM::from_json(json{{"x y", {0.5, 0.5}}}), InvalidInputError);
  REQUIRE_THROWS_AS(
      TableLM::from_json(json{{"", {0.5, 0.5}}, {"0", {1.0}}}),
      InvalidInputError);
  REQUIRE_THROWS_AS(TableLM::load("/nonexistent/nope.json"), InvalidInputError);
}

TEST_CASE("TableScorer lookup") {
  const json j = {
      {"0 1", 0.8},
      {"1", 0.1},
      {"_default", 0.25},
  };
  const TableScorer scorer = TableScorer::from_json(j);
  const AttributeTarget target{"flagged", Polarity::kAvoid};
  const std::vector<TokenSeq> seqs = {{0, 1}, {1}, {5, 5}};
  const std::vector<double> got = scorer.score_batch(seqs, target);
  REQUIRE(got == std::vector<double>{0.8, 0.1, 0.25});

  const TableScorer strict = TableScorer::from_json(json{{"0", 0.5}});
  REQUIRE(strict.score_one({0}, target) == 0.5);
  REQUIRE_THROWS_AS(strict.score_one({1}, target), InvalidInputError);
}

TEST_CASE("TableScorer validation") {
  REQUIRE_THROWS_AS(TableScorer::from_json(json{{"0", 1.5}}), InvalidInputError);
  REQUIRE_THROWS_AS(TableScorer::from_json(json{{"0", -0.1}}), InvalidInputError);
  REQUIRE_THROWS_AS(TableScorer::from_json(json::object()), InvalidInputError);
  REQUIRE_THROWS_AS(TableScorer::from_json(json{{"bad key", 0.5}}), InvalidInputError);
}

TEST_CASE("LexiconScorer sigmoid counts") {
  const LexiconScorer scorer({TokenId{5}}, -2.0, 2.0);
  const AttributeTarget target{"flagged", Polarity::kAvoid};
  REQUIRE(near(scorer.score_one({1, 2, 3}, target), 0.11920292202211755));
  REQUIRE(near(scorer.score_one({5}, target), 0.5));
  REQUIRE(near(scorer.score_one({5, 1, 5}, target), 0.8807970779778823));
  REQUIRE(near(scorer.score_one({}, target), 0.11920292202211755));
}

TEST_CASE("LexiconScorer load skips out-of-vocabulary words") {
  Vocabulary vocab({"<bos>", "<eos>", "sludge", "fox"}, 0, 1);
  TempFile f("caif_test_lexicon.txt", "sludge\nnotaword\n");
  const LexiconScorer scorer = LexiconScorer::load(f.path.string(), vocab);
  REQUIRE(scorer.flagged_ids() == std::unordered_set<TokenId>{2});
  REQUIRE_THROWS_AS(LexiconScorer::load("/nonexistent/lex.txt", vocab), InvalidInputError);
}

TEST_CASE("remap_ids via token strings") {
  Vocabulary a({"<bos>", "<eos>", "x", "y"}, 0, 1);
  Vocabulary b({"<bos>", "<eos>", "y", "x"}, 0, 1);
  REQUIRE(remap_ids({2, 3, 3}, a, b) == TokenSeq{3, 2, 2});
  REQUIRE(remap_ids({}, a, b).empty());

  Vocabulary c({"<bos>", "<eos>", "x"}, 0, 1);
  REQUIRE_THROWS_AS(remap_ids({3}, a, c), InvalidInputError);
}
