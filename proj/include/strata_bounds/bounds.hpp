#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace strata_bounds {

enum class BoundsMethod { lee, conditional_lee, lee_ipw };

inline const char* to_string(BoundsMethod m) {
  switch (m) {
    case BoundsMethod::lee: return "lee";
    case BoundsMethod::conditional_lee: return "conditional-lee";
    case BoundsMethod::lee_ipw: return "lee-ipw";
  }
  return "?";
}

struct ArmCounts {
  std::size_t treated = 0;
  std::size_t control = 0;
  std::size_t treated_observed = 0;
  std::size_t control_observed = 0;
};

/// Per-stratum piece of a conditional Lee estimate.
struct StratumBounds {
  std::string label;
  std::size_t n_g = 0;
  bool ok = false;
  std::string failure;  // set when !ok
  double tau = std::numeric_limits<double>::quiet_NaN();
  double tau_raw = std::numeric_limits<double>::quiet_NaN();
  double mu0 = std::numeric_limits<double>::quiet_NaN();
  double mu1_lb = std::numeric_limits<double>::quiet_NaN();
  double mu1_ub = std::numeric_limits<double>::quiet_NaN();
};

/// Weights, shares and reweighted outcomes behind a Lee-IPW estimate.
struct IpwComponents {
  std::vector<double> w_c;  // per block
  std::vector<double> w_q;  // per block
  double p_hat = 0.0;
  double delta_hat = 0.0;
  double q_hat = 0.0;
  double q_raw = 0.0;
  std::vector<double> y_tilde;           // treated-observed units, row order
  std::vector<std::size_t> y_tilde_unit;  // row index of each y_tilde entry
  double cutoff_lo = 0.0;  // ỹ_q
  double cutoff_hi = 0.0;  // ỹ_{1-q}
};

struct BoundsEstimate {
  BoundsMethod method = BoundsMethod::lee;
  double delta_lb = 0.0;
  double delta_ub = 0.0;
  double mu0 = 0.0;
  double mu1_lb = 0.0;
  double mu1_ub = 0.0;
  double q = 0.0;      // trimming share actually used (clamped)
  double q_raw = 0.0;  // before clamping
  double cutoff_lb = std::numeric_limits<double>::quiet_NaN();  // y_{1-q}
  double cutoff_ub = std::numeric_limits<double>::quiet_NaN();  // y_q
  ArmCounts n_used;

  bool monotonicity_violated = false;  // raw q < 0, clamped to 0
  bool heterogeneous_shares = false;   // pooled Lee on varying η_g
  std::size_t strata_dropped = 0;      // conditional Lee only
  std::string aggregation_weight;      // conditional Lee only
  bool arms_swapped = false;  // estimated with d := 1-d; mu/q/cutoff fields use swapped arms
  std::vector<std::string> warnings;

  std::vector<StratumBounds> strata;  // conditional Lee only
  IpwComponents ipw;                  // Lee-IPW only

  double width() const noexcept { return delta_ub - delta_lb; }
};

}  // namespace strata_bounds
