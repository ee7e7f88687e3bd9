#pragma once

// Pooled Lee bounds and per-stratum (conditional) Lee bounds.

#include <algorithm>
#include <string>
#include <vector>

#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/trimming.hpp"

namespace strata_bounds {

struct TrimmingShare {
  double q = 0.0;      // clamped into [0,1)
  double q_raw = 0.0;
  double keep = 1.0;   // 1 - q, held as the exact selection-rate ratio
  bool clamped = false;
};

/// q = 1 - rate0/rate1 from observed/assigned counts in each arm.
inline TrimmingShare trimming_share_from_counts(std::size_t n1, std::size_t n1s, std::size_t n0,
                                                std::size_t n0s) {
  if (n1 == 0 || n0 == 0) throw EstimationError("trimming share needs both arms");
  if (n1s == 0) throw EstimationError("undefined trimming share: no observed treated units");
  TrimmingShare out;
  const double ratio = static_cast<double>(n0s * n1) / static_cast<double>(n0 * n1s);
  out.q_raw = 1.0 - ratio;
  if (ratio > 1.0) {
    out.clamped = true;
    out.keep = 1.0;
    out.q = 0.0;
  } else {
    out.keep = ratio;
    out.q = out.q_raw;
  }
  return out;
}

inline ArmCounts arm_counts(const Dataset& data) {
  ArmCounts c;
  for (const auto& r : data) {
    if (r.d == 1) {
      ++c.treated;
      c.treated_observed += static_cast<std::size_t>(r.s);
    } else {
      ++c.control;
      c.control_observed += static_cast<std::size_t>(r.s);
    }
  }
  return c;
}

/// Pooled q̂ = 1 - P̂r(S=1|D=0)/P̂r(S=1|D=1).
inline TrimmingShare trimming_share_pooled(const Dataset& data) {
  const auto c = arm_counts(data);
  return trimming_share_from_counts(c.treated, c.treated_observed, c.control, c.control_observed);
}

namespace detail {

struct ArmOutcomes {
  std::vector<double> treated;
  std::vector<double> control;
};

template <typename Pred>
ArmOutcomes observed_outcomes(const Dataset& data, Pred&& include) {
  ArmOutcomes out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (!r.observed() || !include(i)) continue;
    (r.treated() ? out.treated : out.control).push_back(*r.y);
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Pooled Lee bounds. Valid under equal shares; flags heterogeneous designs.
inline BoundsEstimate lee_bounds(const Dataset& data) {
  BoundsEstimate est;
  est.method = BoundsMethod::lee;
  est.n_used = arm_counts(data);
  if (est.n_used.treated_observed == 0 || est.n_used.control_observed == 0) {
    throw EstimationError("lee bounds need observed units in both arms");
  }
  const auto share = trimming_share_pooled(data);
  const auto y = detail::observed_outcomes(data, [](std::size_t) { return true; });

  const auto lo = trim_keep(y.treated, share.keep, TrimSide::upper_tail);
  const auto hi = trim_keep(y.treated, share.keep, TrimSide::lower_tail);
  est.mu0 = detail::mean(y.control);
  est.mu1_lb = lo.mean;
  est.mu1_ub = hi.mean;
  est.cutoff_lb = lo.cutoff;
  est.cutoff_ub = hi.cutoff;
  est.delta_lb = est.mu1_lb - est.mu0;
  est.delta_ub = est.mu1_ub - est.mu0;
  est.q = share.q;
  est.q_raw = share.q_raw;
  est.monotonicity_violated = share.clamped;
  if (share.clamped) {
    est.warnings.push_back("negative raw trimming share; clamped to 0 (monotonicity violated in sample)");
  }

  try {
    const auto design = block_design(data);
    est.heterogeneous_shares = !design.equal_shares();
  } catch (const ValidationError&) {
    // Pooled Lee does not need every block to hold both arms.
  }
  if (est.heterogeneous_shares) {
    est.warnings.push_back("treatment shares vary across blocks; unconditional Lee bounds are invalid");
  }
  return est;
}

/// Trims within each stratum with its own share, then averages the stratum
/// bounds with weights N_g. Strata where the cell bound is undefined are
/// dropped and counted.
inline BoundsEstimate conditional_lee_bounds(const Dataset& data, const BlockDesign& design) {
  BoundsEstimate est;
  est.method = BoundsMethod::conditional_lee;
  est.aggregation_weight = "stratum_size";
  est.n_used = arm_counts(data);

  std::vector<std::vector<double>> treated(design.block_count()), control(design.block_count());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (!r.observed()) continue;
    auto& bucket = r.treated() ? treated : control;
    bucket[design.unit_block[i]].push_back(*r.y);
  }

  double wsum = 0.0, lb = 0.0, ub = 0.0, mu0 = 0.0, q = 0.0;
  std::size_t clamped = 0;
  for (std::size_t g = 0; g < design.block_count(); ++g) {
    const auto& b = design.blocks[g];
    StratumBounds cell;
    cell.label = b.label;
    cell.n_g = b.n_g;
    try {
      if (b.n1s_g == 0 || b.n0s_g == 0) {
        throw EstimationError("the trimmed mean is not well defined (no observed " +
                              std::string(b.n1s_g == 0 ? "treated" : "control") + " unit)");
      }
      const auto share = trimming_share_from_counts(b.t_g, b.n1s_g, b.controls(), b.n0s_g);
      cell.tau = share.q;
      cell.tau_raw = share.q_raw;
      cell.mu1_lb = trim_keep(treated[g], share.keep, TrimSide::upper_tail).mean;
      cell.mu1_ub = trim_keep(treated[g], share.keep, TrimSide::lower_tail).mean;
      cell.mu0 = detail::mean(control[g]);
      cell.ok = true;
      clamped += share.clamped ? 1 : 0;
    } catch (const EstimationError& e) {
      cell.failure = e.what();
    }
    if (cell.ok) {
      const double w = static_cast<double>(b.n_g);
      wsum += w;
      lb += w * cell.mu1_lb;
      ub += w * cell.mu1_ub;
      mu0 += w * cell.mu0;
      q += w * cell.tau;
    } else {
      ++est.strata_dropped;
      est.warnings.push_back("stratum '" + b.label + "' dropped: " + cell.failure);
    }
    est.strata.push_back(std::move(cell));
  }
  if (wsum == 0.0) {
    std::string labels;
    for (const auto& c : est.strata) labels += (labels.empty() ? "" : ", ") + c.label;
    throw EstimationError("conditional Lee bounds undefined in every stratum: " + labels);
  }
  est.mu0 = mu0 / wsum;
  est.mu1_lb = lb / wsum;
  est.mu1_ub = ub / wsum;
  est.delta_lb = est.mu1_lb - est.mu0;
  est.delta_ub = est.mu1_ub - est.mu0;
  est.q = q / wsum;
  est.q_raw = est.q;
  est.monotonicity_violated = clamped > 0;
  if (clamped > 0) {
    est.warnings.push_back(std::to_string(clamped) + " strata had a negative raw trimming share");
  }
  for (const auto& c : est.strata) {
    if (c.ok && c.tau > 0.9) {
      est.warnings.push_back("stratum '" + c.label + "' trims nearly all treated units");
    }
  }
  return est;
}

inline BoundsEstimate conditional_lee_bounds(const Dataset& data) {
  return conditional_lee_bounds(data, block_design(data));
}

}  // namespace strata_bounds
