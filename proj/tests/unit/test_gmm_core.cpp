#include <gtest/gtest.h>

#include "oracles.hpp"
#include "strata_bounds/gmm_core.hpp"

using namespace strata_bounds;

TEST(GmmCore, HandExampleTheta) {
  const auto data = oracle::hand_example();
  const auto design = block_design(data);
  const auto lb = fit_theta(data, design, MomentSystem::lee_lb);
  EXPECT_EQ(lb.lee().delta, 0.0);
  EXPECT_EQ(lb.lee().mu0, 3.5);
  EXPECT_EQ(lb.lee().p, 0.25);
  EXPECT_DOUBLE_EQ(lb.lee().alpha, 0.6);
  EXPECT_EQ(lb.lee().cutoff, 6.0);
  EXPECT_EQ(lb.size(), 20);
  const auto ub = fit_theta(data, design, MomentSystem::lee_ub);
  EXPECT_EQ(ub.estimate, 2.0);
  EXPECT_EQ(ub.lee().cutoff, 3.0);
  for (int k = 0; k < 5; ++k) {
    EXPECT_LE(std::abs(lb.residual(k)), lb.residual_bound(k));
    EXPECT_LE(std::abs(ub.residual(k)), ub.residual_bound(k));
  }
}

TEST(GmmCore, LeeMomentsOfSingleUnits) {
  const LeeTheta t{1.0, 2.0, 0.25, 0.6, 5.0};
  const auto kept = lee_moments(oracle::unit(4.0, 1, "b"), t);
  EXPECT_DOUBLE_EQ(kept(0), 4.0 - 2.0 - 1.0);
  EXPECT_DOUBLE_EQ(kept(1), -0.25);
  EXPECT_DOUBLE_EQ(kept(2), 1.0 - 0.8);
  EXPECT_DOUBLE_EQ(kept(3), 0.0);
  const auto trimmed = lee_moments(oracle::unit(7.0, 1, "b"), t);
  EXPECT_DOUBLE_EQ(trimmed(0), 0.0);
  EXPECT_DOUBLE_EQ(trimmed(1), 0.75);
  const auto control = lee_moments(oracle::unit(3.0, 0, "b"), t);
  EXPECT_DOUBLE_EQ(control(0), -1.0);
  EXPECT_DOUBLE_EQ(control(3), 0.4);
  EXPECT_DOUBLE_EQ(control(4), 1.0);
  const auto missing = lee_moments(oracle::unit(std::nullopt, 0, "b"), t);
  EXPECT_DOUBLE_EQ(missing(3), -0.6);
  EXPECT_DOUBLE_EQ(missing(0), 0.0);
}

TEST(GmmCore, ResidualsWithinBoundsOnRandomData) {
  SplitMix64 rng(41);
  int fits = 0;
  for (int it = 0; it < 200; ++it) {
    const auto data = oracle::random_dataset(rng, {.integer_outcomes = it % 2 == 0});
    const auto design = block_design(data);
    for (auto sys : {MomentSystem::lee_lb, MomentSystem::lee_ub, MomentSystem::ipw_lb, MomentSystem::ipw_ub}) {
      GmmFit fit;
      try {
        fit = fit_theta(data, design, sys);
      } catch (const InternalConsistencyError& e) {
        ADD_FAILURE() << e.what();
        continue;
      } catch (const EstimationError&) {
        continue;
      }
      ++fits;
      for (int k = 0; k < 5; ++k) {
        if (fit.residual_bound(k) >= 0.0) EXPECT_LE(std::abs(fit.residual(k)), fit.residual_bound(k));
      }
      EXPECT_EQ(fit.residual_bound(is_ipw(sys) ? 4 : 2) < 0.0, fit.rate_row_clamped);
    }
  }
  EXPECT_GT(fits, 500);
}

TEST(GmmCore, MismatchedSystemIsRejected) {
  const auto data = oracle::hand_example();
  const auto design = block_design(data);
  EXPECT_THROW(fit_theta(data, design, MomentSystem::ipw_lb, lee_bounds(data)), EstimationError);
  EXPECT_THROW(fit_theta(data, design, MomentSystem::lee_lb, conditional_lee_bounds(data)), EstimationError);
}

TEST(GmmCore, ConstantTreatedOutcomesHaveNoBandwidth) {
  std::vector<UnitRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(oracle::unit(1.0, 1, "b"));
  for (int i = 0; i < 4; ++i) recs.push_back(oracle::unit(i < 2 ? std::optional<double>(i) : std::nullopt, 0, "b"));
  const Dataset data(recs);
  const auto design = block_design(data);
  const auto fit = fit_theta(data, design, MomentSystem::lee_lb);
  EXPECT_THROW(default_bandwidth(data, design, MomentSystem::lee_lb, fit), EstimationError);
}

TEST(GmmCore, JacobianStructuralZeros) {
  const auto data = oracle::hand_example();
  const auto design = block_design(data);
  const auto fit = fit_theta(data, design, MomentSystem::lee_lb);
  const auto j = jacobian(data, design, fit, default_bandwidth(data, design, fit.system, fit));
  // rows 2..5 never depend on Δ; row 5 depends on μ0 only
  for (int r = 1; r < 5; ++r) EXPECT_EQ(j(r, 0), 0.0);
  for (int c : {0, 2, 3, 4}) EXPECT_EQ(j(4, c), 0.0);
  EXPECT_DOUBLE_EQ(j(4, 1), -0.3);
  EXPECT_DOUBLE_EQ(j(3, 3), -0.5);
  EXPECT_DOUBLE_EQ(j(1, 2), -0.4);
}

TEST(GmmCore, SandwichIsSymmetricAndSolvesTheSystem) {
  SplitMix64 rng(42);
  for (int it = 0; it < 50; ++it) {
    Eigen::MatrixXd m(5, 5), a(5, 5);
    for (int i = 0; i < 25; ++i) {
      m(i / 5, i % 5) = rng.normal();
      a(i / 5, i % 5) = rng.normal();
    }
    m += 5.0 * Eigen::MatrixXd::Identity(5, 5);
    const Eigen::MatrixXd omega = a * a.transpose();
    const auto v = solve_sandwich(m, omega);
    EXPECT_EQ(v, v.transpose());
    const Eigen::MatrixXd direct = m.inverse() * omega * m.inverse().transpose();
    EXPECT_LT((v - direct).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + direct.cwiseAbs().maxCoeff()));
  }
}

TEST(GmmCore, SingularJacobianIsRejected) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(5, 5);
  m(4, 4) = 0.0;
  EXPECT_THROW(solve_sandwich(m, Eigen::MatrixXd::Identity(5, 5)), SingularJacobianError);
  m(4, 4) = 1e-14;
  EXPECT_THROW(solve_sandwich(m, Eigen::MatrixXd::Identity(5, 5)), SingularJacobianError);
}

namespace {

Eigen::MatrixXd sample_jacobian(const Dataset& data, MomentSystem sys) {
  const auto design = block_design(data);
  const auto fit = fit_theta(data, design, sys);
  return jacobian(data, design, fit, default_bandwidth(data, design, sys, fit));
}

}  // namespace

TEST(GmmCore, LeeJacobianMatchesPopulation) {
  const oracle::LeeNormalDesign dgp;
  const auto data = dgp.sample(100000, 43);
  for (bool lower : {true, false}) {
    const auto got = sample_jacobian(data, lower ? MomentSystem::lee_lb : MomentSystem::lee_ub);
    const auto expected = oracle::numeric_jacobian(
        [&](const Eigen::VectorXd& t) { return dgp.expected_moments(t, lower); }, dgp.theta0(lower));
    EXPECT_LT(oracle::max_relative_error(got, expected), 0.05) << "lower=" << lower << "\n"
                                                                << got << "\n\n"
                                                                << expected;
  }
}

TEST(GmmCore, LeeIpwJacobianMatchesPopulation) {
  const oracle::IpwNormalDesign dgp;
  const auto data = dgp.sample(100000, 44);
  for (bool lower : {true, false}) {
    const auto got = sample_jacobian(data, lower ? MomentSystem::ipw_lb : MomentSystem::ipw_ub);
    const auto expected = oracle::numeric_jacobian(
        [&](const Eigen::VectorXd& t) { return dgp.expected_moments(t, lower); }, dgp.theta0(lower));
    EXPECT_LT(oracle::max_relative_error(got, expected), 0.05) << "lower=" << lower << "\n"
                                                                << got << "\n\n"
                                                                << expected;
  }
}

TEST(GmmCore, PopulationThetaSolvesPopulationMoments) {
  const oracle::LeeNormalDesign lee;
  const oracle::IpwNormalDesign ipw;
  for (bool lower : {true, false}) {
    EXPECT_LT(lee.expected_moments(lee.theta0(lower), lower).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(ipw.expected_moments(ipw.theta0(lower), lower).cwiseAbs().maxCoeff(), 1e-10);
  }
}
