#include <doctest.h>

#include <cmath>
#include <sstream>

#include "clsd/errors.hpp"
#include "clsd/metrics.hpp"
#include "clsd/objective.hpp"
#include "clsd/trainer.hpp"
#include "support.hpp"

using namespace clsd;

namespace {

/// O(P * N) pair count: wins + ties / 2 over all positive/negative pairs.
double brute_force_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

}  // namespace

TEST_CASE("auc basics") {
  CHECK(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 1.0);
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 0.0);
  CHECK(auc(std::vector<double>(6, 0.3), std::vector<std::uint8_t>{0, 1, 0, 1, 1, 0}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}), MetricError);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{0, 0}), MetricError);
}

TEST_CASE("auc equals brute-force pair counting, ties included") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(99);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid so ties are common.
      s[i] = static_cast<double>(rng.below(8)) / 8.0;
      y[i] = static_cast<std::uint8_t>(rng.bernoulli(0.4));
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(auc(s, y) == brute_force_auc(s, y));
  }
}

TEST_CASE("auc invariance and complement") {
  Rng rng(4);
  std::vector<double> s(200);
  std::vector<std::uint8_t> y(200);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.normal();
    y[i] = static_cast<std::uint8_t>(rng.bernoulli(0.3));
  }
  const double base = auc(s, y);
  std::vector<double> e(s.size()), a(s.size()), neg(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    e[i] = std::exp(s[i]);
    a[i] = 3.0 * s[i] - 7.0;
    neg[i] = -s[i];
  }
  CHECK(auc(e, y) == base);
  CHECK(auc(a, y) == base);
  CHECK(auc(neg, y) == doctest::Approx(1.0 - base).epsilon(1e-15));
}

TEST_CASE("average ranks and spearman") {
  CHECK(average_ranks(std::vector<double>{3.0, 1.0, 3.0, 2.0}) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>{1, 1, 1, 1, 1}) == 0.0);
}

TEST_CASE("logloss matches the plain objective") {
  Rng rng(2);
  std::vector<double> p(50);
  std::vector<std::uint8_t> y(50);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = predict(rng.uniform(-4.0, 4.0));
    y[i] = static_cast<std::uint8_t>(rng.bernoulli(0.5));
  }
  CHECK(logloss(p, y) == doctest::Approx(loss_ori(p, y).value / 50.0).epsilon(1e-14));
}

TEST_CASE("confidence recovery") {
  GenConfig g;
  g.records = 20000;
  g.test_records = 10;
  const Corpus c = generate(g).first;

  std::vector<double> latents, noise;
  Rng rng(99);
  for (const auto& r : c.records)
    if (r.label) {
      latents.push_back(*r.latent_confidence);
      noise.push_back(rng.uniform());
    }
  REQUIRE(latents.size() >= 5000);
  CHECK(confidence_recovery(c, latents) == doctest::Approx(1.0));
  CHECK(std::abs(confidence_recovery(c, noise)) < 0.1);

  Corpus few;
  few.schema = c.schema;
  for (const auto& r : c.records) {
    if (r.label) few.records.push_back(r);
    if (few.records.size() == 9) break;
  }
  CHECK_THROWS_AS(confidence_recovery(few, std::vector<double>(9, 0.5)), MetricError);

  Corpus blind = few;
  blind.records.insert(blind.records.end(), few.records.begin(), few.records.end());
  for (auto& r : blind.records) r.latent_confidence.reset();
  CHECK_THROWS_AS(confidence_recovery(blind, std::vector<double>(18, 0.5)), MetricError);
}

TEST_CASE("group statistics") {
  Rng rng(3);
  const Corpus c = testing::random_corpus(testing::tiny_schema(), 300, rng);

  SUBCASE("counts, ordering, normalisation") {
    const ModelParams p = init_params(make_spec(c.schema, Backbone::fm, true), 1);
    const GroupStats s = group_stats(c, p);
    REQUIRE(s.rows.size() == 3);
    std::size_t total = 0;
    double max_norm = 0.0;
    for (std::size_t g = 0; g < 3; ++g) {
      CHECK(s.rows[g].group_id == g);
      total += s.rows[g].count;
      CHECK(*s.rows[g].ctr_normalized > 0.0);
      CHECK(*s.rows[g].ctr_normalized <= 1.0);
      max_norm = std::max(max_norm, *s.rows[g].ctr_normalized);
      CHECK(s.rows[g].mean_p_local.has_value());
    }
    CHECK(total == c.size());
    CHECK(max_norm == 1.0);
  }

  SUBCASE("empty group is marked absent") {
    Corpus only0 = c;
    std::erase_if(only0.records, [](const SampleRecord& r) { return r.group_id == 1; });
    const GroupStats s = group_stats(only0, init_params(make_spec(c.schema, Backbone::lr), 1));
    CHECK(s.rows[1].count == 0);
    CHECK_FALSE(s.rows[1].ctr.has_value());
    CHECK_FALSE(s.rows[1].mean_teacher_score.has_value());
    CHECK_FALSE(s.rows[0].mean_p_local.has_value());
    std::ostringstream out;
    write_group_stats_csv(s, out);
    CHECK(out.str().rfind("group_id,count,ctr,ctr_normalized,mean_teacher_score,mean_p_local\n", 0) == 0);
    CHECK(out.str().find("\n1,0,-,-,-,-\n") != std::string::npos);
  }
}

TEST_CASE("trained group means follow the generator slope") {
  TrainConfig t;
  t.backbone = Backbone::lr;
  t.epochs = 3;

  SUBCASE("slope 0.3: increasing") {
    const auto [train_c, test_c] = generate(GenConfig{});
    const auto s = group_stats(train_c, train(train_c, test_c, t).state.params);
    CHECK(s.teacher_inversions() <= 1);
    CHECK(*s.rows.back().mean_teacher_score > *s.rows.front().mean_teacher_score);
  }

  SUBCASE("slope 0: flat") {
    GenConfig g;
    g.group_ctr_slope = 0.0;
    const auto [train_c, test_c] = generate(g);
    const auto s = group_stats(train_c, train(train_c, test_c, t).state.params);
    CHECK(s.teacher_spread() < 0.02);
  }
}
