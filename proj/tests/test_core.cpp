#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "caif/core.hpp"

using namespace caif;

namespace {
bool near(double a, double b, double eps = 1e-12) { return std::abs(a - b) <= eps; }
}  // namespace

TEST_CASE("Vocabulary basics") {
  Vocabulary v({"<bos>", "<eos>", "a", "b"}, 0, 1);
  REQUIRE(v.size() == 4);
  REQUIRE(v.bos_id() == 0);
  REQUIRE(v.eos_id() == 1);
  REQUIRE(v.token(2) == "a");
  REQUIRE(v.find("b") == TokenId{3});
  REQUIRE_FALSE(v.find("zzz").has_value());
  REQUIRE(v.contains_ids({0, 1, 2, 3}));
  REQUIRE_FALSE(v.contains_ids({4}));
  REQUIRE_FALSE(v.contains_ids({-1}));
}

TEST_CASE("Vocabulary validation") {
  REQUIRE_THROWS_AS(Vocabulary({"only"}, 0, 0), InvalidInputError);
  REQUIRE_THROWS_AS(Vocabulary({"a", "a"}, 0, 1), InvalidInputError);
  REQUIRE_THROWS_AS(Vocabulary({"a", "b"}, 0, 0), InvalidInputError);
  REQUIRE_THROWS_AS(Vocabulary({"a", "b"}, 0, 2), InvalidInputError);
  REQUIRE_THROWS_AS(Vocabulary({"a", "b"}, -1, 1), InvalidInputError);
}

TEST_CASE("fnv1a64 reference values") {
  REQUIRE(fnv1a64("") == 0xcbf29ce484222325ull);
  REQUIRE(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  REQUIRE(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("Vocabulary fingerprint distinguishes content and special ids") {
  Vocabulary a({"x", "y", "z"}, 0, 1);
  Vocabulary same({"x", "y", "z"}, 0, 1);
  Vocabulary reordered({"y", "x", "z"}, 0, 1);
  Vocabulary other_eos({"x", "y", "z"}, 0, 2);
  REQUIRE(a.fingerprint() == same.fingerprint());
  REQUIRE(a.fingerprint() != reordered.fingerprint());
  REQUIRE(a.fingerprint() != other_eos.fingerprint());
  REQUIRE(a.fingerprint_hex().size() == 16);
}

TEST_CASE("SplitMix64 known stream") {
  // Reference outputs of the standard SplitMix64 for seed 0.
  RandomStream rng(0);
  REQUIRE(rng.next_u64() == 0xE220A8397B1DCDAFull);
  REQUIRE(rng.next_u64() == 0x6E789E6AA1B965F4ull);
  REQUIRE(rng.next_u64() == 0x06C45D188009454Full);
}

TEST_CASE("RandomStream reproducibility and unit mapping") {
  RandomStream a(12345);
  RandomStream b(12345);
  for (int i = 0; i < 10000; ++i) {
    REQUIRE(a.next_u64() == b.next_u64());
  }
  RandomStream c(7);
  RandomStream d(7);
  const std::uint64_t raw = c.next_u64();
  REQUIRE(d.next_unit() == static_cast<double>(raw) * 0x1p-64);
  for (int i = 0; i < 1000; ++i) {
    const double u = d.next_unit();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("derive_seed depends on order and both indices") {
  const std::uint64_t base = 99;
  REQUIRE(derive_seed(base, 1, 2) != derive_seed(base, 2, 1));
  REQUIRE(derive_seed(base, 0, 0) != derive_seed(base, 0, 1));
  REQUIRE(derive_seed(base, 0, 0) != derive_seed(base, 1, 0));
  REQUIRE(derive_seed(base, 3, 4) == derive_seed(base, 3, 4));
  REQUIRE(derive_seed(base, 3, 4) != derive_seed(base + 1, 3, 4));
}

TEST_CASE("log_softmax pins") {
  const std::vector<double> sym = log_softmax(std::vector<double>{0.0, 0.0}, 1.0);
  REQUIRE(near(sym[0], std::log(0.5)));
  REQUIRE(near(sym[1], std::log(0.5)));

  const std::vector<double> shifted = log_softmax(std::vector<double>{5.0, 5.0}, 1.0);
  REQUIRE(near(shifted[0], sym[0]));

  const std::vector<double> pin = log_softmax(std::vector<double>{1.0, 0.0}, 1.0);
  REQUIRE(near(pin[0], -0.3132616875182228, 1e-12));
  REQUIRE(near(pin[1], -1.3132616875182228, 1e-12));
}

TEST_CASE("log_softmax properties") {
  const std::vector<double> v{0.3, -2.0, 1.7, 0.0};
  const std::vector<double> lp = log_softmax(v, 1.0);
  double sum = 0.0;
  for (double x : lp) {
    sum += std::exp(x);
  }
  REQUIRE(near(sum, 1.0));

  std::vector<double> vc = v;
  for (double& x : vc) {
    x += 17.0;
  }
  const std::vector<double> lpc = log_softmax(vc, 1.0);
  for (std::size_t i = 0; i < lp.size(); ++i) {
    REQUIRE(near(lp[i], lpc[i]));
  }

  // Temperature rescales score differences.
  const std::vector<double> hot = log_softmax(std::vector<double>{2.0, 0.0}, 2.0);
  const std::vector<double> ref = log_softmax(std::vector<double>{1.0, 0.0}, 1.0);
  REQUIRE(near(hot[0], ref[0]));
  REQUIRE(near(hot[1], ref[1]));
}

TEST_CASE("log_softmax validation") {
  REQUIRE_THROWS_AS(log_softmax(std::vector<double>{}, 1.0), InvalidInputError);
  REQUIRE_THROWS_AS(log_softmax(std::vector<double>{1.0}, 0.0), InvalidInputError);
  REQUIRE_THROWS_AS(log_softmax(std::vector<double>{1.0}, -2.0), InvalidInputError);
  const double inf = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(log_softmax(std::vector<double>{inf, 0.0}, 1.0), InvalidInputError);
  REQUIRE_THROWS_AS(log_softmax(std::vector<double>{std::nan(""), 0.0}, 1.0),
                    InvalidInputError);
}

TEST_CASE("kLogZero underflows to exact zero probability") {
  const std::vector<double> lp = log_softmax(std::vector<double>{0.0, kLogZero}, 1.0);
  REQUIRE(std::exp(lp[1]) == 0.0);
  REQUIRE(near(lp[0], 0.0));
}

TEST_CASE("entropy_nats pins") {
  const std::vector<double> lp{std::log(0.5), std::log(0.25), std::log(0.25)};
  REQUIRE(near(entropy_nats(lp), 1.0397207708399179, 1e-12));

  std::vector<double> uniform8(8, std::log(1.0 / 8.0));
  REQUIRE(near(entropy_nats(uniform8), std::log(8.0), 1e-12));

  // One-hot: exact zero, with 0 ln 0 treated as 0.
  const std::vector<double> onehot = log_softmax(std::vector<double>{0.0, kLogZero}, 1.0);
  REQUIRE(entropy_nats(onehot) == 0.0);
}

TEST_CASE("entropy_nats bounds and validation") {
  const std::vector<double> lp = log_softmax(std::vector<double>{0.1, 0.7, -0.4}, 1.0);
  const double h = entropy_nats(lp);
  REQUIRE(h >= 0.0);
  REQUIRE(h <= std::log(3.0) + 1e-12);
  // Raw logits are not a normalized log-distribution.
  REQUIRE_THROWS_AS(entropy_nats(std::vector<double>{0.1, 0.7, -0.4}), InvalidInputError);
}

TEST_CASE("top_m ordering and ties") {
  const std::vector<double> s1{3.0, 1.0, 2.0};
  REQUIRE(top_m(s1, 2) == std::vector<TokenId>{0, 2});

  const std::vector<double> ties{1.0, 1.0, 1.0};
  REQUIRE(top_m(ties, 2) == std::vector<TokenId>{0, 1});

  const std::vector<double> s2{1.0, 2.0};
  REQUIRE(top_m(s2, 5) == std::vector<TokenId>{1, 0});

  REQUIRE_THROWS_AS(top_m(s2, 0), InvalidInputError);

  // Pure function: identical input, identical output.
  const std::vector<double> s3{0.5, -1.0, 0.5, 2.0};
  REQUIRE(top_m(s3, 3) == top_m(s3, 3));
  REQUIRE(top_m(s3, 3) == std::vector<TokenId>{3, 0, 2});
}

TEST_CASE("StepCriterion factories and validation") {
  REQUIRE(StepCriterion::always() == StepCriterion::always());
  REQUIRE(StepCriterion::periodic(2).period == 2);
  REQUIRE(StepCriterion::entropy(3.2).threshold_nats == 3.2);
  REQUIRE_THROWS_AS(StepCriterion::periodic(0).validate(), InvalidInputError);
  REQUIRE_THROWS_AS(StepCriterion::entropy(-0.1).validate(), InvalidInputError);
  REQUIRE_NOTHROW(StepCriterion::entropy(0.0).validate());
}

TEST_CASE("GuidanceConfig validation") {
  GuidanceConfig g;
  REQUIRE(g.alpha == -5.0);
  REQUIRE(g.top_j == 100);
  REQUIRE(g.top_k == 20);
  REQUIRE(g.prob_clamp_epsilon == 1e-7);
  REQUIRE_NOTHROW(g.validate());

  GuidanceConfig bad = g;
  bad.top_k = 0;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
  bad = g;
  bad.top_k = bad.top_j + 1;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
  bad = g;
  bad.temperature = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
  bad = g;
  bad.max_new_tokens = -1;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
  bad = g;
  bad.max_new_tokens = 0;
  REQUIRE_NOTHROW(bad.validate());
  bad = g;
  bad.prob_clamp_epsilon = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
  bad = g;
  bad.prob_clamp_epsilon = 0.5;
  REQUIRE_THROWS_AS(bad.validate(), InvalidInputError);
}

TEST_CASE("AttributeTarget validation") {
  AttributeTarget t{"toxic", Polarity::kAvoid};
  REQUIRE_NOTHROW(t.validate());
  t.class_label.clear();
  REQUIRE_THROWS_AS(t.validate(), InvalidInputError);
}

TEST_CASE("join_ids") {
  REQUIRE(join_ids({}) == "");
  REQUIRE(join_ids({5}) == "5");
  REQUIRE(join_ids({0, 12, 3}) == "0 12 3");
}
