#pragma once

// Sandwich variance for the bound systems: design-consistent meat with block
// cross-products, an i.i.d. comparator, label-based variance, standard
// errors and confidence intervals.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/errors.hpp"
#include "strata_bounds/gmm_core.hpp"

namespace strata_bounds {

// ---------------------------------------------------------------------------
// Pairing

/// Partner map over blocks. In-set partners are mutual; an out-of-set partner
/// (odd leftover) points at a block that does not point back.
struct Involution {
  std::vector<std::optional<std::size_t>> partner;
  std::vector<bool> out_of_set;

  std::optional<std::size_t> operator()(std::size_t g) const { return partner[g]; }
  std::size_t out_of_set_count() const {
    return static_cast<std::size_t>(std::count(out_of_set.begin(), out_of_set.end(), true));
  }
};

namespace detail {

inline bool key_less(const BlockDesign& design, std::size_t a, std::size_t b) {
  const auto& xa = design.blocks[a].x_mean;
  const auto& xb = design.blocks[b].x_mean;
  if (xa != xb) return std::lexicographical_compare(xa.begin(), xa.end(), xb.begin(), xb.end());
  return a < b;
}

inline double key_distance(const BlockDesign& design, std::size_t a, std::size_t b) {
  const auto& xa = design.blocks[a].x_mean;
  const auto& xb = design.blocks[b].x_mean;
  if (xa.empty()) return std::abs(static_cast<double>(a) - static_cast<double>(b));
  double s = 0.0;
  for (std::size_t k = 0; k < xa.size(); ++k) s += (xa[k] - xb[k]) * (xa[k] - xb[k]);
  return std::sqrt(s);
}

}  // namespace detail

/// Sorts `needs` by covariate-mean key (label order when there are no
/// covariates) and pairs neighbours. An odd leftover is matched to the
/// nearest block outside `needs` with a unit in `arm` (any block if arm < 0),
/// falling back to the nearest other block with such a unit.
inline Involution pair_blocks(const BlockDesign& design, std::vector<std::size_t> needs, int arm = -1) {
  const std::size_t G = design.block_count();
  Involution pi;
  pi.partner.assign(G, std::nullopt);
  pi.out_of_set.assign(G, false);
  if (needs.empty()) return pi;
  std::sort(needs.begin(), needs.end(),
            [&](std::size_t a, std::size_t b) { return detail::key_less(design, a, b); });
  needs.erase(std::unique(needs.begin(), needs.end()), needs.end());
  for (std::size_t k = 0; k + 1 < needs.size(); k += 2) {
    pi.partner[needs[k]] = needs[k + 1];
    pi.partner[needs[k + 1]] = needs[k];
  }
  if (needs.size() % 2 == 1) {
    const std::size_t g = needs.back();
    std::vector<bool> in_needs(G, false);
    for (auto h : needs) in_needs[h] = true;
    auto eligible = [&](std::size_t h) {
      return h != g && (arm < 0 || design.blocks[h].arm_size(arm) >= 1);
    };
    auto nearest = [&](bool outside_only) -> std::optional<std::size_t> {
      std::optional<std::size_t> best;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t h = 0; h < G; ++h) {
        if (!eligible(h) || (outside_only && in_needs[h])) continue;
        const double dist = detail::key_distance(design, g, h);
        if (dist < best_d || (dist == best_d && best && detail::key_less(design, h, *best))) {
          best = h;
          best_d = dist;
        }
      }
      return best;
    };
    auto h = nearest(true);
    if (!h) h = nearest(false);
    if (!h) {
      throw EstimationError("cannot pair block '" + design.blocks[g].label +
                            "': no other block has a unit in the needed arm");
    }
    pi.partner[g] = *h;
    pi.out_of_set[g] = true;
  }
  return pi;
}

// ---------------------------------------------------------------------------
// Meat

struct MeatReport {
  Eigen::MatrixXd a1, a0, a3;
  Eigen::MatrixXd zeta_10, zeta_11, zeta_00;
  Eigen::MatrixXd b_n, omega;
  std::array<std::size_t, 2> singleton_blocks{0, 0};    // indexed by arm
  std::array<std::size_t, 2> out_of_set_partners{0, 0};  // indexed by arm
};

namespace detail {

struct ArmBlockSums {
  Eigen::VectorXd sum;
  Eigen::MatrixXd outer;  // Σ m mᵀ
  std::size_t count = 0;
  std::optional<Eigen::Index> single;  // row of the unit when count == 1
};

}  // namespace detail

/// Ω̂ = Â1 + Â0 + B̂ - Â3 with B̂ = -(ζ(1,1) + ζ(0,0) - 2ζ(1,0)). Blocks with a
/// single unit in an arm borrow that arm's unit from a paired block; pass
/// `allow_pairing = false` to refuse such designs instead.
template <typename Derived>
MeatReport meat_design(const Dataset& data, const BlockDesign& design,
                       const Eigen::MatrixBase<Derived>& moments, bool allow_pairing = true) {
  const auto n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index k = moments.cols();
  if (moments.rows() != n) throw std::invalid_argument("meat_design: moment rows != units");
  const double nd = static_cast<double>(n);
  const std::size_t G = design.block_count();

  MeatReport out;
  out.a1 = Eigen::MatrixXd::Zero(k, k);
  out.a0 = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  std::array<std::vector<detail::ArmBlockSums>, 2> arms;
  for (auto& a : arms) {
    a.resize(G);
    for (auto& s : a) {
      s.sum = Eigen::VectorXd::Zero(k);
      s.outer = Eigen::MatrixXd::Zero(k, k);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd m = moments.row(i).transpose();
    const Eigen::MatrixXd mm = m * m.transpose();
    const int d = data[static_cast<std::size_t>(i)].d;
    (d == 1 ? out.a1 : out.a0) += mm;
    mean += m;
    auto& s = arms[d][design.unit_block[static_cast<std::size_t>(i)]];
    s.sum += m;
    s.outer += mm;
    ++s.count;
    s.single = i;
  }
  out.a1 /= nd;
  out.a0 /= nd;
  mean /= nd;
  out.a3 = mean * mean.transpose();

  out.zeta_10 = Eigen::MatrixXd::Zero(k, k);
  out.zeta_11 = Eigen::MatrixXd::Zero(k, k);
  out.zeta_00 = Eigen::MatrixXd::Zero(k, k);

  std::array<Involution, 2> pi;
  for (int d = 0; d < 2; ++d) {
    std::vector<std::size_t> needs;
    for (std::size_t g = 0; g < G; ++g) {
      if (arms[d][g].count == 1) needs.push_back(g);
    }
    out.singleton_blocks[d] = needs.size();
    if (!needs.empty() && !allow_pairing) {
      throw EstimationError("block '" + design.blocks[needs.front()].label + "' has a single " +
                            (d == 1 ? "treated" : "control") + " unit; at least two per arm are required");
    }
    pi[d] = pair_blocks(design, needs, d);
    out.out_of_set_partners[d] = pi[d].out_of_set_count();
  }

  for (std::size_t g = 0; g < G; ++g) {
    const auto& b = design.blocks[g];
    const double w = static_cast<double>(b.n_g) / nd;
    const double f = w * b.eta_g * (1.0 - b.eta_g);
    const auto& t1 = arms[1][g];
    const auto& t0 = arms[0][g];
    const Eigen::VectorXd m1 = t1.sum / static_cast<double>(t1.count);
    const Eigen::VectorXd m0 = t0.sum / static_cast<double>(t0.count);
    const Eigen::MatrixXd cross = m1 * m0.transpose();
    out.zeta_10 += f * 0.5 * (cross + cross.transpose());

    for (int d = 0; d < 2; ++d) {
      const auto& s = arms[d][g];
      Eigen::MatrixXd varsigma;
      if (s.count >= 2) {
        const double c = static_cast<double>(s.count);
        varsigma = (s.sum * s.sum.transpose() - s.outer) / (c * (c - 1.0));
      } else {
        const std::size_t h = *pi[d](g);
        const auto& other = arms[d][h];
        const Eigen::VectorXd mi = moments.row(*s.single).transpose();
        const Eigen::VectorXd mk = other.count == 1
                                       ? Eigen::VectorXd(moments.row(*other.single).transpose())
                                       : Eigen::VectorXd(other.sum / static_cast<double>(other.count));
        const Eigen::MatrixXd prod = mi * mk.transpose();
        varsigma = 0.5 * (prod + prod.transpose());
      }
      (d == 1 ? out.zeta_11 : out.zeta_00) += f * varsigma;
    }
  }
  out.b_n = -(out.zeta_11 + out.zeta_00 - 2.0 * out.zeta_10);
  out.omega = out.a1 + out.a0 + out.b_n - out.a3;
  return out;
}

/// Centred second moment (1/n) Σ m mᵀ - m̄ m̄ᵀ, ignoring blocks.
template <typename Derived>
Eigen::MatrixXd meat_iid(const Eigen::MatrixBase<Derived>& moments) {
  const Eigen::Index n = moments.rows(), k = moments.cols();
  if (n == 0) throw std::invalid_argument("meat_iid: empty moment matrix");
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd m = moments.row(i).transpose();
    second += m * m.transpose();
    mean += m;
  }
  second /= static_cast<double>(n);
  mean /= static_cast<double>(n);
  return second - mean * mean.transpose();
}

// ---------------------------------------------------------------------------
// Label-based variance

struct LabelVariance {
  double rho_11 = 0.0;
  double rho_00 = 0.0;
  double rho_10 = 0.0;
  double v = 0.0;  // ρ(1,1) + ρ(0,0) - 2ρ(1,0)
};

/// Size-weighted within-label products of arm means and within-arm pairs of
/// Y = S·Y* (zero when unobserved). Every label needs two units per arm.
inline LabelVariance label_variance(const Dataset& data, const BlockDesign& design) {
  std::string bad;
  for (const auto& b : design.blocks) {
    if (b.t_g < 2 || b.controls() < 2) bad += (bad.empty() ? "'" : ", '") + b.label + "'";
  }
  if (!bad.empty()) {
    throw EstimationError("label variance needs at least two treated and two control units in every block; "
                          "violated by " + bad);
  }
  const std::size_t G = design.block_count();
  std::array<std::vector<double>, 2> sum, sq;
  for (int d = 0; d < 2; ++d) {
    sum[d].assign(G, 0.0);
    sq[d].assign(G, 0.0);
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    const double y = r.y_or_zero();
    sum[r.d][design.unit_block[i]] += y;
    sq[r.d][design.unit_block[i]] += y * y;
  }
  LabelVariance out;
  const double n = static_cast<double>(design.n);
  for (std::size_t g = 0; g < G; ++g) {
    const auto& b = design.blocks[g];
    const double w = static_cast<double>(b.n_g) / n;
    const double t1 = static_cast<double>(b.t_g), t0 = static_cast<double>(b.controls());
    out.rho_10 += w * (sum[1][g] / t1) * (sum[0][g] / t0);
    out.rho_11 += w * (sum[1][g] * sum[1][g] - sq[1][g]) / (t1 * (t1 - 1.0));
    out.rho_00 += w * (sum[0][g] * sum[0][g] - sq[0][g]) / (t0 * (t0 - 1.0));
  }
  out.v = out.rho_11 + out.rho_00 - 2.0 * out.rho_10;
  return out;
}

// ---------------------------------------------------------------------------
// Standard errors and intervals

struct StandardError {
  double sigma2 = 0.0;  // variance of √n(bound)
  double se = 0.0;
  bool non_psd = false;
};

/// Lee systems: σ² = V11. Lee-IPW systems: σ² = V11 + V22 - 2V12.
inline StandardError standard_errors(const Eigen::MatrixXd& v, MomentSystem system, std::size_t n) {
  StandardError out;
  out.sigma2 = is_ipw(system) ? v(0, 0) + v(1, 1) - 2.0 * v(0, 1) : v(0, 0);
  out.non_psd = out.sigma2 < 0.0;
  out.se = std::sqrt(std::max(out.sigma2, 0.0) / static_cast<double>(n));
  return out;
}

struct Interval {
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();

  bool contains(double x) const { return lo <= x && x <= hi; }
  double width() const { return hi - lo; }
};

struct ConfidenceIntervals {
  Interval lb, ub, set;
  double z = 0.0;               // z_{1-α/2}
  double critical_value = 0.0;  // Imbens-Manski c
  bool degenerate = false;
};

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Solves Φ(c + width/se) - Φ(-c) = 1 - α for c by bisection.
inline double imbens_manski_critical_value(double width, double se, double alpha) {
  const double lo0 = normal_quantile(1.0 - alpha), hi0 = normal_quantile(1.0 - alpha / 2.0);
  const double shift = std::max(width, 0.0) / se;
  auto f = [&](double c) {
    return detail::normal_cdf(c + shift) - detail::normal_cdf(-c) - (1.0 - alpha);
  };
  double lo = lo0, hi = hi0;
  if (f(hi) <= 0.0) return hi;
  if (f(lo) >= 0.0) return lo;
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline ConfidenceIntervals confidence_intervals(double delta_lb, double delta_ub, double se_lb,
                                                double se_ub, double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw ValidationError("alpha must lie in (0, 0.5)");
  ConfidenceIntervals out;
  out.z = normal_quantile(1.0 - alpha / 2.0);
  out.degenerate = !(se_lb > 0.0) || !(se_ub > 0.0);
  const double sl = std::max(se_lb, 0.0), su = std::max(se_ub, 0.0);
  out.lb = {delta_lb - out.z * sl, delta_lb + out.z * sl};
  out.ub = {delta_ub - out.z * su, delta_ub + out.z * su};
  const double se = std::max(sl, su);
  out.critical_value = se > 0.0 ? imbens_manski_critical_value(delta_ub - delta_lb, se, alpha) : out.z;
  out.set = {delta_lb - out.critical_value * sl, delta_ub + out.critical_value * su};
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

enum class VarianceMethod { design, iid, label };

inline const char* to_string(VarianceMethod m) {
  switch (m) {
    case VarianceMethod::design: return "design";
    case VarianceMethod::iid: return "iid";
    case VarianceMethod::label: return "label";
  }
  return "?";
}

struct BoundInference {
  GmmFit fit;
  double bandwidth = 0.0;
  Eigen::MatrixXd jacobian;
  Eigen::MatrixXd omega;
  Eigen::MatrixXd v_hat;
  StandardError se;
  std::optional<MeatReport> meat;  // design and label methods
};

struct VarianceReport {
  VarianceMethod method = VarianceMethod::design;
  double alpha = 0.05;
  BoundInference lb, ub;
  double se_lb = 0.0, se_ub = 0.0;
  ConfidenceIntervals ci;
  bool non_psd = false;
  std::optional<LabelVariance> label;
};

inline BoundInference infer_bound(const Dataset& data, const BlockDesign& design, const BoundsEstimate& est,
                                  MomentSystem system, VarianceMethod method) {
  BoundInference out;
  out.fit = fit_theta(data, design, system, est);
  out.bandwidth = default_bandwidth(data, design, system, out.fit);
  out.jacobian = jacobian(data, design, out.fit, out.bandwidth);
  if (method == VarianceMethod::iid) {
    out.omega = meat_iid(out.fit.moments);
  } else {
    out.meat = meat_design(data, design, out.fit.moments, method == VarianceMethod::design);
    out.omega = out.meat->omega;
  }
  out.v_hat = solve_sandwich(out.jacobian, out.omega);
  out.se = standard_errors(out.v_hat, system, data.size());
  return out;
}

/// Standard errors and intervals for both bounds of a lee or lee_ipw estimate.
inline VarianceReport estimate_variance(const Dataset& data, const BlockDesign& design,
                                        const BoundsEstimate& est, VarianceMethod method, double alpha) {
  if (est.method == BoundsMethod::conditional_lee) {
    throw EstimationError("no variance estimator is defined for conditional Lee bounds");
  }
  VarianceReport rep;
  rep.method = method;
  rep.alpha = alpha;
  if (method == VarianceMethod::label) rep.label = label_variance(data, design);
  const bool ipw = est.method == BoundsMethod::lee_ipw;
  rep.lb = infer_bound(data, design, est, ipw ? MomentSystem::ipw_lb : MomentSystem::lee_lb, method);
  rep.ub = infer_bound(data, design, est, ipw ? MomentSystem::ipw_ub : MomentSystem::lee_ub, method);
  rep.se_lb = rep.lb.se.se;
  rep.se_ub = rep.ub.se.se;
  rep.non_psd = rep.lb.se.non_psd || rep.ub.se.non_psd;
  rep.ci = confidence_intervals(est.delta_lb, est.delta_ub, rep.se_lb, rep.se_ub, alpha);
  return rep;
}

}  // namespace strata_bounds
