#pragma once

// Just-identified moment systems for the Lee and Lee-IPW bounds, closed-form
// parameter assembly, a kernel-smoothed Jacobian and the sandwich product.
//
// Lee system, θ = (Δ, μ0, p, α, c):
//   (Y-μ0-Δ) S D L - (Y-μ0) S (1-D)
//   (U - p) S D
//   (S - α/(1-p)) D
//   (S - α)(1-D)
//   (Y-μ0) S (1-D)
// with L = 1{Y ≤ c} and U = 1 - L among treated observed units (mirrored for
// the upper bound). The cutoff c and the last row make Δ and μ0 separately
// identified.
//
// Lee-IPW system, θ = (μ1, μ0, c, δ, q), Ỹ = (δ/η_b) Y:
//   (Ỹ - μ1) D S 1{Ỹ ≤ c}
//   (Y - μ0)(1-D) S w_c
//   (1{Ỹ > c} - q) D S
//   r_b (D - δ)
//   (1-q)/p D S - w_q (1-D) S / (1-p)

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/errors.hpp"
#include "strata_bounds/ipw_estimator.hpp"
#include "strata_bounds/lee_estimator.hpp"

namespace strata_bounds {

enum class MomentSystem { lee_lb, lee_ub, ipw_lb, ipw_ub };

inline const char* to_string(MomentSystem s) {
  switch (s) {
    case MomentSystem::lee_lb: return "lee_lb";
    case MomentSystem::lee_ub: return "lee_ub";
    case MomentSystem::ipw_lb: return "ipw_lb";
    case MomentSystem::ipw_ub: return "ipw_ub";
  }
  return "?";
}

constexpr bool is_lower(MomentSystem s) {
  return s == MomentSystem::lee_lb || s == MomentSystem::ipw_lb;
}
constexpr bool is_ipw(MomentSystem s) {
  return s == MomentSystem::ipw_lb || s == MomentSystem::ipw_ub;
}

using Vector5 = Eigen::Matrix<double, 5, 1>;
using MomentMatrix = Eigen::Matrix<double, Eigen::Dynamic, 5, Eigen::RowMajor>;

struct LeeTheta {
  double delta = 0.0;   // bound on the always-observed effect
  double mu0 = 0.0;
  double p = 0.0;       // trimming share
  double alpha = 0.0;   // control selection rate
  double cutoff = 0.0;  // y_{1-p} (lower bound) or y_p (upper bound)

  Vector5 vec() const { return {delta, mu0, p, alpha, cutoff}; }
};

struct LeeIpwTheta {
  double mu1 = 0.0;
  double mu0 = 0.0;
  double cutoff = 0.0;  // ỹ_{1-q} (lower bound) or ỹ_q (upper bound)
  double delta = 0.0;
  double q = 0.0;

  Vector5 vec() const { return {mu1, mu0, cutoff, delta, q}; }
};

/// Per-unit moments of the Lee system. `lower` selects which tail is trimmed.
inline Vector5 lee_moments(const UnitRecord& r, const LeeTheta& t, bool lower = true) {
  const double s = r.s, d = r.d, y = r.y_or_zero();
  double kept = 0.0;
  if (r.treated() && r.observed()) kept = lower ? (y <= t.cutoff) : (y >= t.cutoff);
  const double trimmed = (r.treated() && r.observed()) ? 1.0 - kept : 0.0;
  Vector5 m;
  m(0) = (y - t.mu0 - t.delta) * s * d * kept - (y - t.mu0) * s * (1.0 - d);
  m(1) = (trimmed - t.p) * s * d;
  m(2) = (s - t.alpha / (1.0 - t.p)) * d;
  m(3) = (s - t.alpha) * (1.0 - d);
  m(4) = (y - t.mu0) * s * (1.0 - d);
  return m;
}

/// Per-unit moments of the Lee-IPW system for a unit in block `b`.
inline Vector5 lee_ipw_moments(const UnitRecord& r, const LeeIpwTheta& t, const BlockSummary& b,
                               double p_hat, bool lower = true) {
  if (!(p_hat > 0.0 && p_hat < 1.0)) throw ValidationError("treated fraction must lie in (0,1)");
  const double s = r.s, d = r.d, y = r.y_or_zero();
  const double yt = t.delta / b.eta_g * y;
  double kept = 0.0;
  if (r.treated() && r.observed()) kept = lower ? (yt <= t.cutoff) : (yt >= t.cutoff);
  Vector5 m;
  m(0) = (yt - t.mu1) * d * s * kept;
  m(1) = (y - t.mu0) * (1.0 - d) * s * control_weight(b.eta_g, p_hat);
  m(2) = (1.0 - kept - t.q) * d * s;
  m(3) = b.m_g * (d - t.delta);
  m(4) = (1.0 - t.q) / p_hat * d * s - share_weight(b.eta_g, p_hat) * (1.0 - d) * s / (1.0 - p_hat);
  return m;
}

/// Fitted parameters with their moment matrix and residual diagnostics.
struct GmmFit {
  MomentSystem system = MomentSystem::lee_lb;
  Vector5 theta = Vector5::Zero();
  MomentMatrix moments;
  Vector5 residual = Vector5::Zero();        // column means at θ̂
  Vector5 residual_bound = Vector5::Zero();  // negative entry: row not checked
  bool rate_row_clamped = false;
  std::size_t tied_at_cutoff = 0;
  double estimate = 0.0;  // the bound implied by θ̂

  LeeTheta lee() const { return {theta(0), theta(1), theta(2), theta(3), theta(4)}; }
  LeeIpwTheta ipw() const { return {theta(0), theta(1), theta(2), theta(3), theta(4)}; }
  Eigen::Index size() const { return moments.rows(); }
};

namespace detail {

inline Vector5 column_means(const MomentMatrix& m) {
  Vector5 s = Vector5::Zero();
  for (Eigen::Index i = 0; i < m.rows(); ++i) s += m.row(i).transpose();
  return s / static_cast<double>(m.rows());
}

inline double max_abs_outcome(const Dataset& data) {
  double out = 0.0;
  for (const auto& r : data) out = std::max(out, std::abs(r.y_or_zero()));
  return out;
}

}  // namespace detail

/// Assembles θ̂ from a point estimate (lee or lee_ipw method) and checks the
/// sample moment conditions. The trimmed-mean and share rows carry a
/// boundary residual from the fractional unit at the cutoff.
inline GmmFit fit_theta(const Dataset& data, const BlockDesign& design, MomentSystem system,
                        const BoundsEstimate& est) {
  const bool lower = is_lower(system);
  const bool ipw = is_ipw(system);
  if (ipw != (est.method == BoundsMethod::lee_ipw) || est.method == BoundsMethod::conditional_lee) {
    throw EstimationError(std::string("estimate does not match moment system ") + to_string(system));
  }
  GmmFit fit;
  fit.system = system;
  const double n = static_cast<double>(data.size());
  fit.moments.resize(static_cast<Eigen::Index>(data.size()), 5);
  const double cutoff = lower ? est.cutoff_lb : est.cutoff_ub;
  const double mu1 = lower ? est.mu1_lb : est.mu1_ub;
  fit.estimate = lower ? est.delta_lb : est.delta_ub;

  if (!ipw) {
    const auto& c = est.n_used;
    LeeTheta t{fit.estimate, est.mu0, est.q,
               static_cast<double>(c.control_observed) / static_cast<double>(c.control), cutoff};
    fit.theta = t.vec();
    for (std::size_t i = 0; i < data.size(); ++i) {
      fit.moments.row(static_cast<Eigen::Index>(i)) = lee_moments(data[i], t, lower).transpose();
      if (data[i].treated() && data[i].observed() && *data[i].y == cutoff) ++fit.tied_at_cutoff;
    }
  } else {
    LeeIpwTheta t{mu1, est.mu0, cutoff, est.ipw.delta_hat, est.q};
    fit.theta = t.vec();
    for (std::size_t i = 0; i < data.size(); ++i) {
      fit.moments.row(static_cast<Eigen::Index>(i)) =
          lee_ipw_moments(data[i], t, design.block_of(i), design.p_hat, lower).transpose();
    }
    for (double v : est.ipw.y_tilde) fit.tied_at_cutoff += (v == cutoff) ? 1 : 0;
  }
  fit.rate_row_clamped = est.monotonicity_violated;

  fit.residual = detail::column_means(fit.moments);
  const double scale = std::max(1.0, detail::max_abs_outcome(data));
  const double tol = 1e-8 * scale;
  const double tc = static_cast<double>(fit.tied_at_cutoff);
  const double ymax = ipw ? std::max(1.0, std::abs(cutoff)) : scale;
  fit.residual_bound.setConstant(tol);
  // Rows: trimmed mean, trim share, selection rate.
  const int mean_row = 0, share_row = ipw ? 2 : 1, rate_row = ipw ? 4 : 2;
  fit.residual_bound(mean_row) = tc * std::abs(cutoff - mu1) / n + 1e-8 * std::max(scale, ymax);
  fit.residual_bound(share_row) = tc / n + 1e-12;
  if (fit.rate_row_clamped) fit.residual_bound(rate_row) = -1.0;

  for (int k = 0; k < 5; ++k) {
    if (fit.residual_bound(k) < 0.0) continue;
    if (!(std::abs(fit.residual(k)) <= fit.residual_bound(k))) {
      throw InternalConsistencyError("moment row " + std::to_string(k + 1) + " of " +
                                     to_string(system) + " has residual " +
                                     std::to_string(fit.residual(k)) + " above its bound " +
                                     std::to_string(fit.residual_bound(k)));
    }
  }
  return fit;
}

inline GmmFit fit_theta(const Dataset& data, const BlockDesign& design, MomentSystem system) {
  return fit_theta(data, design, system,
                   is_ipw(system) ? lee_ipw_bounds(data, design) : lee_bounds(data));
}

/// Silverman-style bandwidth 1.06·sd·K^{-1/5} over the K treated observed
/// outcomes that enter the trimming indicator (Y, or Ỹ for Lee-IPW).
inline double default_bandwidth(const Dataset& data, const BlockDesign& design, MomentSystem system,
                                const GmmFit& fit) {
  std::vector<double> v;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (!(r.treated() && r.observed())) continue;
    v.push_back(is_ipw(system) ? fit.theta(3) / design.block_of(i).eta_g * *r.y : *r.y);
  }
  if (v.size() < 2) throw EstimationError("bandwidth needs at least two observed treated units");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  if (!(sd > 0.0)) throw EstimationError("bandwidth undefined: observed treated outcomes are constant");
  return 1.06 * sd * std::pow(static_cast<double>(v.size()), -0.2);
}

namespace detail {

inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace detail

/// Condition number of a square matrix (ratio of extreme singular values).
inline double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || !(sv(sv.size() - 1) > 0.0)) return std::numeric_limits<double>::infinity();
  return sv(0) / sv(sv.size() - 1);
}

inline constexpr double kMaxCondition = 1e12;

/// M̂ = (1/n) Σ ∂θ m̃(Z_i, θ̂), where m̃ replaces each trimming indicator by a
/// normal-CDF ramp of width `bandwidth`.
inline Eigen::MatrixXd jacobian(const Dataset& data, const BlockDesign& design, const GmmFit& fit,
                                double bandwidth) {
  if (!(bandwidth > 0.0)) throw EstimationError("bandwidth must be positive");
  const double h = bandwidth;
  const double sgn = is_lower(fit.system) ? 1.0 : -1.0;
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(5, 5);

  if (!is_ipw(fit.system)) {
    const auto t = fit.lee();
    for (const auto& r : data) {
      const double s = r.s, d = r.d, y = r.y_or_zero();
      const double z = sgn * (t.cutoff - y) / h;
      const double k = s * d * detail::normal_cdf(z);
      const double kc = s * d * sgn * detail::normal_pdf(z) / h;
      // columns: Δ, μ0, p, α, c
      j(0, 0) += -k;
      j(0, 1) += -k + s * (1.0 - d);
      j(0, 4) += (y - t.mu0 - t.delta) * kc;
      j(1, 2) += -s * d;
      j(1, 4) += -kc;
      j(2, 2) += -t.alpha * d / ((1.0 - t.p) * (1.0 - t.p));
      j(2, 3) += -d / (1.0 - t.p);
      j(3, 3) += -(1.0 - d);
      j(4, 1) += -s * (1.0 - d);
    }
  } else {
    const auto t = fit.ipw();
    const double p = design.p_hat;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& r = data[i];
      const auto& b = design.block_of(i);
      const double s = r.s, d = r.d, y = r.y_or_zero();
      const double dy = y / b.eta_g;  // ∂Ỹ/∂δ
      const double yt = t.delta * dy;
      const double z = sgn * (t.cutoff - yt) / h;
      const double phi = detail::normal_pdf(z);
      const double k = detail::normal_cdf(z);
      const double kc = sgn * phi / h;
      const double kd = -sgn * phi * dy / h;
      // columns: μ1, μ0, c, δ, q
      j(0, 0) += -d * s * k;
      j(0, 2) += (yt - t.mu1) * d * s * kc;
      j(0, 3) += d * s * (dy * k + (yt - t.mu1) * kd);
      j(1, 1) += -(1.0 - d) * s * control_weight(b.eta_g, p);
      j(2, 2) += -kc * d * s;
      j(2, 3) += -kd * d * s;
      j(2, 4) += -d * s;
      j(3, 3) += -b.m_g;
      j(4, 4) += -d * s / p;
    }
  }
  j /= static_cast<double>(data.size());
  if (!j.allFinite()) throw SingularJacobianError("jacobian has non-finite entries");
  const double cond = condition_number(j);
  if (!(cond <= kMaxCondition)) {
    throw SingularJacobianError("jacobian is singular (condition number " + std::to_string(cond) + ")");
  }
  return j;
}

/// V = M⁻¹ Ω M⁻ᵀ, symmetrized.
inline Eigen::MatrixXd solve_sandwich(const Eigen::MatrixXd& m, const Eigen::MatrixXd& omega) {
  if (m.rows() != m.cols() || omega.rows() != m.rows() || omega.cols() != m.cols()) {
    throw std::invalid_argument("solve_sandwich: dimension mismatch");
  }
  const double cond = condition_number(m);
  if (!(cond <= kMaxCondition)) {
    throw SingularJacobianError("jacobian is singular (condition number " + std::to_string(cond) + ")");
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  const Eigen::MatrixXd a = lu.solve(omega);                  // M⁻¹ Ω
  const Eigen::MatrixXd v = lu.solve(a.transpose()).transpose();  // (M⁻¹ (M⁻¹Ω)ᵀ)ᵀ = M⁻¹ Ω M⁻ᵀ
  return (v + v.transpose()) / 2.0;
}

}  // namespace strata_bounds
