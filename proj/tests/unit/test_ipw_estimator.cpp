#include <gtest/gtest.h>

#include "oracles.hpp"
#include "strata_bounds/ipw_estimator.hpp"

using namespace strata_bounds;
using oracle::unit;

namespace {

/// Blocks (N=4, T=1) and (N=4, T=3); every treated unit observed, controls
/// observed only in the first block.
Dataset eight_unit_example() {
  std::vector<UnitRecord> recs{
      unit(4.0, 1, "a"), unit(1.0, 0, "a"),          unit(2.0, 0, "a"), unit(3.0, 0, "a"),
      unit(3.0, 1, "b"), unit(6.0, 1, "b"),          unit(9.0, 1, "b"), unit(std::nullopt, 0, "b"),
  };
  return Dataset(recs);
}

}  // namespace

TEST(LeeIpw, EightUnitExample) {
  const auto data = eight_unit_example();
  const auto design = block_design(data);
  const auto est = lee_ipw_bounds(data, design);
  EXPECT_DOUBLE_EQ(est.q, 0.75);
  EXPECT_DOUBLE_EQ(est.ipw.delta_hat, 0.25);
  EXPECT_EQ(est.ipw.p_hat, 0.5);
  ASSERT_EQ(est.ipw.w_c.size(), 2u);
  EXPECT_DOUBLE_EQ(est.ipw.w_c[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(est.ipw.w_c[1], 2.0);
  EXPECT_DOUBLE_EQ(est.ipw.w_q[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(est.ipw.w_q[1], 3.0);
  EXPECT_DOUBLE_EQ(est.mu0, 2.0);
  EXPECT_DOUBLE_EQ(est.delta_lb, -1.0);
  EXPECT_DOUBLE_EQ(est.delta_ub, 2.0);
  // the second block has no observed control
  EXPECT_FALSE(est.warnings.empty());
}

TEST(LeeIpw, HandExampleMatchesLee) {
  const auto est = lee_ipw_bounds(oracle::hand_example());
  EXPECT_EQ(est.q, 0.25);
  EXPECT_EQ(est.delta_lb, 0.0);
  EXPECT_EQ(est.delta_ub, 2.0);
  EXPECT_EQ(est.ipw.delta_hat, 0.5);
}

TEST(LeeIpw, EqualShareReduction) {
  SplitMix64 rng(31);
  int compared = 0;
  for (int it = 0; it < 400; ++it) {
    const auto data = oracle::random_dataset(rng, {.equal_shares = true, .integer_outcomes = it % 3 == 0});
    const auto design = block_design(data);
    ASSERT_TRUE(design.equal_shares());
    EXPECT_EQ(always_observed_treat_prob(data, design), design.blocks.front().eta_g);
    BoundsEstimate lee, ipw;
    try {
      lee = lee_bounds(data);
    } catch (const EstimationError&) {
      EXPECT_THROW(lee_ipw_bounds(data, design), EstimationError);
      continue;
    }
    ipw = lee_ipw_bounds(data, design);
    EXPECT_NEAR(ipw.delta_lb, lee.delta_lb, 1e-10);
    EXPECT_NEAR(ipw.delta_ub, lee.delta_ub, 1e-10);
    EXPECT_NEAR(ipw.q, lee.q, 1e-10);
    EXPECT_EQ(ipw.monotonicity_violated, lee.monotonicity_violated);
    ++compared;
  }
  EXPECT_GT(compared, 300);
}

TEST(LeeIpw, ShareAndDeltaMatchDirectFormulas) {
  SplitMix64 rng(32);
  for (int it = 0; it < 300; ++it) {
    const auto data = oracle::random_dataset(rng);
    const auto design = block_design(data);
    const double p = design.p_hat;
    double num = 0.0, den = 0.0, dnum = 0.0, dden = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& r = data[i];
      const auto& b = design.block_of(i);
      if (r.d == 0 && r.s == 1) num += share_weight(b.eta_g, p);
      if (r.d == 1 && r.s == 1) den += 1.0;
      dnum += r.d * b.m_g;
      dden += b.m_g;
    }
    const auto share = ipw_trimming_share(data, design);
    EXPECT_NEAR(share.q_raw, 1.0 - p * num / ((1.0 - p) * den), 1e-12);
    EXPECT_EQ(share.clamped, share.q_raw < 0.0);
    EXPECT_NEAR(always_observed_treat_prob(data, design), dnum / dden, 1e-12);
  }
}

TEST(LeeIpw, BoundOrderingAndWeightsOnRandomData) {
  SplitMix64 rng(33);
  for (int it = 0; it < 300; ++it) {
    const auto data = oracle::random_dataset(rng);
    const auto design = block_design(data);
    try {
      const auto est = lee_ipw_bounds(data, design);
      EXPECT_LE(est.delta_lb, est.delta_ub);
      EXPECT_GE(est.q, 0.0);
      EXPECT_EQ(est.ipw.y_tilde.size(), est.n_used.treated_observed);
      for (std::size_t g = 0; g < design.block_count(); ++g) {
        EXPECT_GT(est.ipw.w_c[g], 0.0);
        EXPECT_GT(est.ipw.w_q[g], 0.0);
      }
      if (est.q < 0.5) EXPECT_LE(est.ipw.cutoff_lo, est.ipw.cutoff_hi);
    } catch (const EstimationError&) {
    }
  }
}

TEST(LeeIpw, NoObservedControlsIsAnError) {
  std::vector<UnitRecord> recs{unit(1.0, 1, "a"), unit(std::nullopt, 0, "a"), unit(2.0, 1, "b"),
                               unit(std::nullopt, 0, "b")};
  EXPECT_THROW(lee_ipw_bounds(Dataset(recs)), EstimationError);
}
