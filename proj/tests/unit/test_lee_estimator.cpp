#include <gtest/gtest.h>

#include "oracles.hpp"
#include "strata_bounds/lee_estimator.hpp"

using namespace strata_bounds;
using oracle::unit;

TEST(LeeEstimator, HandExampleIsExact) {
  const auto est = lee_bounds(oracle::hand_example());
  EXPECT_EQ(est.q, 0.25);
  EXPECT_EQ(est.delta_lb, 0.0);
  EXPECT_EQ(est.delta_ub, 2.0);
  EXPECT_EQ(est.mu0, 3.5);
  EXPECT_EQ(est.cutoff_lb, 6.0);
  EXPECT_EQ(est.cutoff_ub, 3.0);
  EXPECT_FALSE(est.monotonicity_violated);
  EXPECT_FALSE(est.heterogeneous_shares);
  EXPECT_TRUE(est.warnings.empty());
  EXPECT_EQ(est.n_used.treated_observed, 8u);
  EXPECT_EQ(est.n_used.control_observed, 6u);
}

TEST(LeeEstimator, TrimmingShareFromCounts) {
  const auto s = trimming_share_from_counts(10, 8, 10, 6);
  EXPECT_EQ(s.q, 0.25);
  EXPECT_EQ(s.keep, 0.75);
  const auto c = trimming_share_from_counts(10, 5, 10, 6);
  EXPECT_TRUE(c.clamped);
  EXPECT_EQ(c.q, 0.0);
  EXPECT_DOUBLE_EQ(c.q_raw, -0.2);
  EXPECT_THROW(trimming_share_from_counts(10, 0, 10, 6), EstimationError);
}

TEST(LeeEstimator, NegativeShareIsClampedAndFlagged) {
  std::vector<UnitRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(unit(i < 2 ? std::optional<double>(i) : std::nullopt, 1, "b"));
  for (int i = 0; i < 4; ++i) recs.push_back(unit(static_cast<double>(i), 0, "b"));
  const auto est = lee_bounds(Dataset(recs));
  EXPECT_TRUE(est.monotonicity_violated);
  EXPECT_EQ(est.q, 0.0);
  EXPECT_DOUBLE_EQ(est.q_raw, -1.0);
  EXPECT_EQ(est.delta_lb, est.delta_ub);
  EXPECT_DOUBLE_EQ(est.delta_lb, 0.5 - 1.5);
  EXPECT_FALSE(est.warnings.empty());
}

TEST(LeeEstimator, HeterogeneousSharesAreFlagged) {
  auto recs = oracle::hand_example_records("a");
  for (int i = 0; i < 3; ++i) recs.push_back(unit(1.0, i == 0, "c"));
  const auto est = lee_bounds(Dataset(recs));
  EXPECT_TRUE(est.heterogeneous_shares);
  EXPECT_FALSE(est.warnings.empty());
}

TEST(LeeEstimator, NeedsObservedUnitsInBothArms) {
  std::vector<UnitRecord> recs{unit(1.0, 1, "b"), unit(std::nullopt, 0, "b"), unit(2.0, 1, "b"),
                               unit(std::nullopt, 0, "b")};
  EXPECT_THROW(lee_bounds(Dataset(recs)), EstimationError);
}

TEST(LeeEstimator, InvariantsOnRandomData) {
  SplitMix64 rng(21);
  for (int it = 0; it < 300; ++it) {
    const auto data = oracle::random_dataset(rng, {.integer_outcomes = it % 2 == 0});
    BoundsEstimate est;
    try {
      est = lee_bounds(data);
    } catch (const DegenerateTrimError&) {
      continue;
    }
    EXPECT_LE(est.delta_lb, est.delta_ub);
    EXPECT_GE(est.q, 0.0);
    EXPECT_LT(est.q, 1.0);
    EXPECT_EQ(est.monotonicity_violated, est.q_raw < 0.0);

    // row order does not matter
    auto recs = data.records();
    rng.shuffle(recs);
    const auto perm = lee_bounds(Dataset(recs));
    EXPECT_NEAR(perm.delta_lb, est.delta_lb, 1e-12 * (1.0 + std::abs(est.delta_lb)));
    EXPECT_NEAR(perm.delta_ub, est.delta_ub, 1e-12 * (1.0 + std::abs(est.delta_ub)));

    // common shift leaves the bounds unchanged; positive scale scales them
    auto shifted = data.records();
    for (auto& r : shifted) {
      if (r.y) *r.y = 4.0 * *r.y + 10.0;
    }
    const auto s = lee_bounds(Dataset(shifted));
    EXPECT_NEAR(s.delta_lb, 4.0 * est.delta_lb, 1e-9 * (1.0 + std::abs(s.delta_lb)) + 1e-9);
    EXPECT_NEAR(s.delta_ub, 4.0 * est.delta_ub, 1e-9 * (1.0 + std::abs(s.delta_ub)) + 1e-9);
  }
}

TEST(ConditionalLee, SingleBlockEqualsPooledLee) {
  const auto data = oracle::hand_example();
  const auto c = conditional_lee_bounds(data);
  EXPECT_EQ(c.delta_lb, 0.0);
  EXPECT_EQ(c.delta_ub, 2.0);
  EXPECT_EQ(c.q, 0.25);
  EXPECT_EQ(c.aggregation_weight, "stratum_size");
  ASSERT_EQ(c.strata.size(), 1u);
  EXPECT_TRUE(c.strata[0].ok);
}

TEST(ConditionalLee, WeightsStrataBySize) {
  auto recs = oracle::hand_example_records("a");  // 20 units: bounds [0, 2]
  // 4 units: treated {10, 20}, controls {5, -}: q = 0.5 → trimmed treated means 10 and 20
  recs.push_back(unit(10.0, 1, "b"));
  recs.push_back(unit(20.0, 1, "b"));
  recs.push_back(unit(5.0, 0, "b"));
  recs.push_back(unit(std::nullopt, 0, "b"));
  const auto c = conditional_lee_bounds(Dataset(recs));
  EXPECT_NEAR(c.delta_lb, (20.0 * 0.0 + 4.0 * 5.0) / 24.0, 1e-12);
  EXPECT_NEAR(c.delta_ub, (20.0 * 2.0 + 4.0 * 15.0) / 24.0, 1e-12);
  EXPECT_NEAR(c.q, (20.0 * 0.25 + 4.0 * 0.5) / 24.0, 1e-12);
  EXPECT_EQ(c.strata_dropped, 0u);
}

TEST(ConditionalLee, DropsUndefinedStrata) {
  auto recs = oracle::hand_example_records("a");
  recs.push_back(unit(3.0, 1, "b"));
  recs.push_back(unit(std::nullopt, 0, "b"));
  const auto c = conditional_lee_bounds(Dataset(recs));
  EXPECT_EQ(c.strata_dropped, 1u);
  EXPECT_EQ(c.delta_lb, 0.0);
  EXPECT_EQ(c.delta_ub, 2.0);
  ASSERT_EQ(c.strata.size(), 2u);
  EXPECT_FALSE(c.strata[1].ok);
  EXPECT_FALSE(c.strata[1].failure.empty());
  EXPECT_FALSE(c.warnings.empty());
}

TEST(ConditionalLee, FailsWhenNoStratumIsDefined) {
  std::vector<UnitRecord> recs{unit(1.0, 1, "a"), unit(std::nullopt, 0, "a"), unit(std::nullopt, 1, "b"),
                               unit(2.0, 0, "b")};
  EXPECT_THROW(conditional_lee_bounds(Dataset(recs)), EstimationError);
}

TEST(ConditionalLee, BoundOrderingOnRandomData) {
  SplitMix64 rng(22);
  for (int it = 0; it < 300; ++it) {
    const auto data = oracle::random_dataset(rng);
    try {
      const auto c = conditional_lee_bounds(data);
      EXPECT_LE(c.delta_lb, c.delta_ub + 1e-12);
      for (const auto& s : c.strata) {
        if (s.ok) EXPECT_LE(s.mu1_lb, s.mu1_ub);
      }
    } catch (const EstimationError&) {
    }
  }
}
