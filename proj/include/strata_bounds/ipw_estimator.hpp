#pragma once

// Lee-IPW bounds for stratified designs whose treated share varies by block.

#include <numeric>
#include <string>
#include <vector>

#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/lee_estimator.hpp"
#include "strata_bounds/trimming.hpp"

namespace strata_bounds {

/// w_c = (1-p)/(1-η_g).
inline double control_weight(double eta, double p) { return (1.0 - p) / (1.0 - eta); }

/// w_q = η_g(1-p)/((1-η_g)p).
inline double share_weight(double eta, double p) { return eta * (1.0 - p) / ((1.0 - eta) * p); }

/// q̂ = 1 - p̂ Σ(1-D)S w_q / ((1-p̂) Σ DS), clamped into [0,1).
///
/// Evaluated through p̂ w_{q,g}/(1-p̂) = T_g/(N_g-T_g). Blocks with the same
/// reduced odds are summed in integers first, so an equal-share design
/// rounds exactly like the pooled ratio.
inline TrimmingShare ipw_trimming_share(const Dataset& data, const BlockDesign& design) {
  (void)data;
  std::size_t n1s = 0;
  for (const auto& b : design.blocks) n1s += b.n1s_g;
  if (n1s == 0) throw EstimationError("undefined trimming share: no observed treated units");

  struct Odds {
    std::size_t t, c, n0s;
  };
  std::vector<Odds> groups;
  for (const auto& b : design.blocks) {
    const std::size_t g = std::gcd(b.t_g, b.controls());
    const std::size_t t = b.t_g / g, c = b.controls() / g;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const Odds& o) { return o.t == t && o.c == c; });
    if (it == groups.end()) {
      groups.push_back({t, c, b.n0s_g});
    } else {
      it->n0s += b.n0s_g;
    }
  }
  double keep = 0.0;
  for (const auto& o : groups) {
    keep += static_cast<double>(o.n0s * o.t) / static_cast<double>(o.c * n1s);
  }
  TrimmingShare out;
  out.q_raw = 1.0 - keep;
  if (keep > 1.0) {
    out.clamped = true;
    out.keep = 1.0;
    out.q = 0.0;
  } else {
    out.keep = keep;
    out.q = out.q_raw;
  }
  return out;
}

/// δ̂ = Σ D_i m̂_{b_i} / Σ m̂_{b_i}, the share of always-observed units that are treated.
inline double always_observed_treat_prob(const Dataset& data, const BlockDesign& design) {
  (void)data;
  double denom = 0.0;
  for (const auto& b : design.blocks) denom += static_cast<double>(b.n_g) * b.m_g;
  if (!(denom > 0.0)) {
    throw EstimationError("undefined always-observed treatment probability: no observed controls");
  }
  // Centred at the first block's share; identical shares then give η exactly.
  const double ref = design.blocks.front().eta_g;
  double num = 0.0;
  for (const auto& b : design.blocks) num += static_cast<double>(b.n_g) * b.m_g * (b.eta_g - ref);
  return ref + num / denom;
}

inline BoundsEstimate lee_ipw_bounds(const Dataset& data, const BlockDesign& design) {
  BoundsEstimate est;
  est.method = BoundsMethod::lee_ipw;
  est.n_used = arm_counts(data);
  if (est.n_used.treated_observed == 0 || est.n_used.control_observed == 0) {
    throw EstimationError("lee-ipw bounds need observed units in both arms");
  }
  auto& c = est.ipw;
  c.p_hat = design.p_hat;
  for (const auto& b : design.blocks) {
    c.w_c.push_back(control_weight(b.eta_g, c.p_hat));
    c.w_q.push_back(share_weight(b.eta_g, c.p_hat));
  }
  const auto share = ipw_trimming_share(data, design);
  c.q_hat = share.q;
  c.q_raw = share.q_raw;
  c.delta_hat = always_observed_treat_prob(data, design);

  double wy = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (!r.observed()) continue;
    const auto g = design.unit_block[i];
    if (r.treated()) {
      c.y_tilde.push_back(c.delta_hat / design.blocks[g].eta_g * *r.y);
      c.y_tilde_unit.push_back(i);
    } else {
      wy += c.w_c[g] * *r.y;
      wsum += c.w_c[g];
    }
  }
  const auto lo = trim_keep(c.y_tilde, share.keep, TrimSide::upper_tail);
  const auto hi = trim_keep(c.y_tilde, share.keep, TrimSide::lower_tail);
  c.cutoff_hi = lo.cutoff;
  c.cutoff_lo = hi.cutoff;

  est.mu0 = wy / wsum;
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
  for (auto& w : design_warnings(design)) est.warnings.push_back(std::move(w));
  return est;
}

inline BoundsEstimate lee_ipw_bounds(const Dataset& data) {
  return lee_ipw_bounds(data, block_design(data));
}

}  // namespace strata_bounds
