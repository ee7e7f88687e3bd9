#pragma once

// Simulation designs and a seeded, thread-count-independent Monte Carlo driver.
//
// dgp 1: matched pairs on a normal covariate, selection 0.8 / 0.7, observed
//        treated outcomes shifted by Unif(0,2).
// dgp 2: 100 strata of 20 with Pareto(2.2) shocks; the stratum outlier is
//        almost never observed under control.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/ipw_estimator.hpp"
#include "strata_bounds/lee_estimator.hpp"
#include "strata_bounds/rng.hpp"
#include "strata_bounds/trimming.hpp"
#include "strata_bounds/variance.hpp"

namespace strata_bounds {

/// A generated dataset plus the potential outcomes behind it.
struct SimulatedData {
  Dataset data;
  std::vector<double> y0, y1;  // Y*(0), Y*(1) (dgp 1: Y*(1) includes the shift)
  std::vector<int> s0, s1;     // potential selection
  std::vector<bool> outlier;   // dgp 2 only
};

namespace detail {

struct Potentials {
  std::vector<double> y0, y1;
  std::vector<int> s0, s1;
  std::vector<bool> outlier;
};

inline std::string block_label(const char* prefix, std::size_t k, std::size_t count) {
  const int width = static_cast<int>(std::to_string(count > 0 ? count - 1 : 0).size());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, k);
  return buf;
}

inline std::vector<std::size_t> order_by(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return idx;
}

}  // namespace detail

inline SimulatedData simulate_dgp1(std::uint64_t seed, std::size_t n = 10000) {
  if (n < 2 || n % 2 != 0) throw ValidationError("dgp 1 needs an even sample size >= 2");
  SplitMix64 rng(seed);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.normal();
    y[i] = 2.0 * x[i] + 2.0 + rng.normal();
  }
  const auto order = detail::order_by(x);

  std::vector<UnitRecord> records(n);
  detail::Potentials out;
  out.y0.resize(n);
  out.y1.resize(n);
  out.s0.resize(n);
  out.s1.resize(n);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const std::size_t first_treated = rng.bernoulli(0.5) ? 0 : 1;
    const auto label = detail::block_label("p", k, n / 2);
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t row = 2 * k + j;
      const std::size_t i = order[row];
      const int s1 = rng.bernoulli(0.8), s0 = rng.bernoulli(0.7);
      const double u = rng.uniform(0.0, 2.0);
      auto& r = records[row];
      r.d = (j == first_treated) ? 1 : 0;
      r.s = r.d == 1 ? s1 : s0;
      if (r.s == 1) r.y = r.d == 1 ? y[i] + u : y[i];
      r.block = label;
      r.x = {x[i]};
      out.y0[row] = y[i];
      out.y1[row] = y[i] + u;
      out.s0[row] = s0;
      out.s1[row] = s1;
    }
  }
  return {Dataset(std::move(records)), std::move(out.y0), std::move(out.y1), std::move(out.s0),
          std::move(out.s1), std::move(out.outlier)};
}

inline constexpr std::size_t kDgp2Strata = 100;
inline constexpr std::size_t kDgp2StratumSize = 20;
inline constexpr std::size_t kDgp2Treated = 10;

struct Dgp2Options {
  /// Also force one unselected unit per arm and stratum. Turning this off
  /// keeps only the selected-count quotas (sensitivity runs).
  bool require_unselected = true;
};

inline SimulatedData simulate_dgp2(std::uint64_t seed, Dgp2Options opts = {}) {
  constexpr std::size_t G = kDgp2Strata, m = kDgp2StratumSize, n = G * m;
  SplitMix64 rng(seed);
  std::vector<double> x(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.normal();
    v[i] = std::pow(1.0 - 0.995 * rng.uniform(), -1.0 / 2.2);
  }
  const auto order = detail::order_by(x);

  detail::Potentials out;
  out.y0.resize(n);
  out.y1.resize(n);
  out.s0.resize(n);
  out.s1.resize(n);
  out.outlier.assign(n, false);
  std::vector<int> d(n, 0);
  std::vector<double> xs(n);

  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t base = g * m;
    std::size_t top = base;
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t row = base + j, i = order[row];
      xs[row] = x[i];
      out.y0[row] = 2.0 * x[i] + 2.0 + 12.0 * v[i];
      out.y1[row] = out.y0[row] + 1.0;
      if (out.y0[row] > out.y0[top]) top = row;
    }
    out.outlier[top] = true;

    std::vector<std::size_t> slots(m);
    for (std::size_t j = 0; j < m; ++j) slots[j] = base + j;
    rng.shuffle(slots);
    for (std::size_t j = 0; j < kDgp2Treated; ++j) d[slots[j]] = 1;

    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t row = base + j;
      const double u = rng.uniform();
      const double p1 = out.outlier[row] ? 1.00 : 0.98;
      const double p0 = out.outlier[row] ? 0.01 : 0.94;
      out.s1[row] = u < p1;
      out.s0[row] = u < p0;
    }

    // Minimal adjustment so every arm has enough selected and unselected units.
    auto fix = [&](int arm, std::size_t min_selected) {
      auto observed = [&](std::size_t r) { return arm == 1 ? out.s1[r] : out.s0[r]; };
      auto pick = [&](int want) {
        std::vector<std::size_t> pool;
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t r = base + j;
          if (d[r] == arm && observed(r) == want) pool.push_back(r);
        }
        return pool[rng.below(pool.size())];
      };
      auto count = [&](int want) {
        std::size_t c = 0;
        for (std::size_t j = 0; j < m; ++j) c += (d[base + j] == arm && observed(base + j) == want);
        return c;
      };
      while (count(1) < min_selected) {
        const auto r = pick(0);
        if (arm == 1) {
          out.s1[r] = 1;
        } else {
          out.s0[r] = 1;
          out.s1[r] = 1;
        }
      }
      while (opts.require_unselected && count(0) < 1) {
        const auto r = pick(1);
        if (arm == 1) {
          out.s1[r] = 0;
          out.s0[r] = 0;
        } else {
          out.s0[r] = 0;
        }
      }
    };
    fix(1, 3);
    fix(0, 2);
  }

  std::vector<UnitRecord> records(n);
  for (std::size_t row = 0; row < n; ++row) {
    auto& r = records[row];
    r.d = d[row];
    r.s = r.d == 1 ? out.s1[row] : out.s0[row];
    if (r.s == 1) r.y = r.d == 1 ? out.y1[row] : out.y0[row];
    r.block = detail::block_label("s", row / m, G);
    r.x = {xs[row]};
  }
  return {Dataset(std::move(records)), std::move(out.y0), std::move(out.y1), std::move(out.s0),
          std::move(out.s1), std::move(out.outlier)};
}

// ---------------------------------------------------------------------------
// Population values

struct Dgp1Truth {
  double q = 0.0;
  double mu0 = 2.0;
  double delta_lb = 0.0;
  double delta_ub = 0.0;
  double effect = 1.0;  // always-observed effect: E[U]
};

/// Lee bounds of the dgp 1 population: q and μ0 in closed form, trimmed
/// treated means from `draws` direct draws of 2X + 2 + ε + U.
inline Dgp1Truth dgp1_truth(std::size_t draws = 10'000'000, std::uint64_t seed = 0x5EED'7255'7A11'0001ULL) {
  Dgp1Truth t;
  t.q = 1.0 - 0.7 / 0.8;
  SplitMix64 rng(seed);
  std::vector<double> w(draws);
  for (auto& v : w) {
    const double x = rng.normal();
    const double e = rng.normal();
    v = 2.0 * x + 2.0 + e + rng.uniform(0.0, 2.0);
  }
  const double keep = 0.7 / 0.8;
  t.delta_lb = trim_keep(w, keep, TrimSide::upper_tail).mean - t.mu0;
  t.delta_ub = trim_keep(w, keep, TrimSide::lower_tail).mean - t.mu0;
  return t;
}

// ---------------------------------------------------------------------------
// Monte Carlo

struct McEstimator {
  BoundsMethod method = BoundsMethod::lee;
  std::optional<VarianceMethod> variance;

  std::string name() const {
    std::string s = to_string(method);
    if (variance) s += std::string("/") + to_string(*variance);
    return s;
  }
};

struct McConfig {
  int dgp = 1;
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  std::size_t n = 10000;  // dgp 1 only
  double alpha = 0.05;
  std::vector<McEstimator> estimators;  // empty: defaults for the dgp
  unsigned threads = 0;                 // 0: hardware concurrency
  std::size_t truth_draws = 10'000'000;
  Dgp2Options dgp2;
};

inline std::vector<McEstimator> default_estimators(int dgp) {
  if (dgp == 1) {
    return {{BoundsMethod::lee, VarianceMethod::iid}, {BoundsMethod::lee, VarianceMethod::design}};
  }
  return {{BoundsMethod::lee_ipw, VarianceMethod::design},
          {BoundsMethod::lee_ipw, VarianceMethod::iid},
          {BoundsMethod::conditional_lee, std::nullopt}};
}

struct RepRecord {
  std::size_t rep = 0;
  std::string estimator;
  double delta_lb = std::numeric_limits<double>::quiet_NaN();
  double delta_ub = std::numeric_limits<double>::quiet_NaN();
  double se_lb = std::numeric_limits<double>::quiet_NaN();
  double se_ub = std::numeric_limits<double>::quiet_NaN();
  std::optional<bool> covered_lb, covered_ub, covered_set;
  std::vector<std::string> flags;
  bool failed = false;
  std::string error;
};

struct EstimatorSummary {
  std::string estimator;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  double mean_lb = 0.0, mean_ub = 0.0;
  double sd_lb = 0.0, sd_ub = 0.0;  // NaN when fewer than two replications
  double mean_se_lb = std::numeric_limits<double>::quiet_NaN();
  double mean_se_ub = std::numeric_limits<double>::quiet_NaN();
  double coverage_lb = std::numeric_limits<double>::quiet_NaN();
  double coverage_ub = std::numeric_limits<double>::quiet_NaN();
  double coverage_set = std::numeric_limits<double>::quiet_NaN();
  double lb_above_effect = 0.0;  // share of replications with delta_lb > effect
  std::size_t flagged = 0;
  std::map<std::string, std::size_t> flag_counts;
};

struct MonteCarloSummary {
  McConfig config;
  double truth_lb = 0.0, truth_ub = 0.0, effect = 1.0;
  std::vector<EstimatorSummary> estimators;
  std::vector<RepRecord> reps;  // ordered by (rep, estimator)

  const EstimatorSummary* find(const std::string& name) const {
    for (const auto& e : estimators) {
      if (e.estimator == name) return &e;
    }
    return nullptr;
  }
};

/// Worker count: `requested` (hardware concurrency when 0), capped by
/// STRATA_BOUNDS_THREADS when set.
inline unsigned resolve_threads(unsigned requested) {
  unsigned t = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STRATA_BOUNDS_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap > 0) t = std::min<unsigned>(t, static_cast<unsigned>(cap));
  }
  return std::max(1u, t);
}

namespace detail {

inline std::vector<RepRecord> run_replication(const McConfig& cfg, std::size_t rep, double truth_lb,
                                              double truth_ub, double effect) {
  std::vector<RepRecord> out;
  const auto seed = child_seed(cfg.seed, rep);
  std::optional<SimulatedData> sim;
  std::string gen_error;
  try {
    sim = cfg.dgp == 1 ? simulate_dgp1(seed, cfg.n) : simulate_dgp2(seed, cfg.dgp2);
  } catch (const std::exception& e) {
    gen_error = e.what();
  }
  std::map<BoundsMethod, BoundsEstimate> cache;
  std::map<BoundsMethod, std::string> cache_error;
  std::optional<BlockDesign> design;
  if (sim) design = block_design(sim->data);

  for (const auto& est_spec : cfg.estimators) {
    RepRecord rec;
    rec.rep = rep;
    rec.estimator = est_spec.name();
    try {
      if (!sim) throw EstimationError("data generation failed: " + gen_error);
      if (!cache.count(est_spec.method) && !cache_error.count(est_spec.method)) {
        try {
          switch (est_spec.method) {
            case BoundsMethod::lee: cache.emplace(est_spec.method, lee_bounds(sim->data)); break;
            case BoundsMethod::conditional_lee:
              cache.emplace(est_spec.method, conditional_lee_bounds(sim->data, *design));
              break;
            case BoundsMethod::lee_ipw: cache.emplace(est_spec.method, lee_ipw_bounds(sim->data, *design)); break;
          }
        } catch (const std::exception& e) {
          cache_error.emplace(est_spec.method, e.what());
        }
      }
      if (cache_error.count(est_spec.method)) throw EstimationError(cache_error.at(est_spec.method));
      const auto& est = cache.at(est_spec.method);
      rec.delta_lb = est.delta_lb;
      rec.delta_ub = est.delta_ub;
      if (est.monotonicity_violated) rec.flags.push_back("monotonicity_violated");
      if (est.heterogeneous_shares) rec.flags.push_back("heterogeneous_shares");
      if (est.strata_dropped > 0) rec.flags.push_back("strata_dropped");
      if (est_spec.variance) {
        const auto v = estimate_variance(sim->data, *design, est, *est_spec.variance, cfg.alpha);
        rec.se_lb = v.se_lb;
        rec.se_ub = v.se_ub;
        if (v.non_psd) rec.flags.push_back("non_psd");
        if (v.ci.degenerate) rec.flags.push_back("degenerate_ci");
        if (cfg.dgp == 1) {
          rec.covered_lb = v.ci.lb.contains(truth_lb);
          rec.covered_ub = v.ci.ub.contains(truth_ub);
        } else {
          rec.covered_lb = v.ci.lb.lo <= effect;
          rec.covered_ub = v.ci.ub.hi >= effect;
        }
        rec.covered_set = v.ci.set.contains(effect);
      }
    } catch (const std::exception& e) {
      rec = RepRecord{};
      rec.rep = rep;
      rec.estimator = est_spec.name();
      rec.failed = true;
      rec.error = e.what();
      rec.flags.push_back("failed");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double share_true(const std::vector<bool>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(std::count(v.begin(), v.end(), true)) / static_cast<double>(v.size());
}

}  // namespace detail

/// Runs `reps` replications, each from its own child seed. Results are
/// stored by replication index, so the output does not depend on threads.
inline MonteCarloSummary monte_carlo(McConfig cfg) {
  if (cfg.reps < 1) throw ValidationError("reps must be at least 1");
  if (cfg.dgp != 1 && cfg.dgp != 2) throw ValidationError("dgp must be 1 or 2");
  if (!(cfg.alpha > 0.0 && cfg.alpha < 0.5)) throw ValidationError("alpha must lie in (0, 0.5)");
  if (cfg.dgp == 1 && (cfg.n < 2 || cfg.n % 2 != 0)) throw ValidationError("dgp 1 needs an even n");
  if (cfg.estimators.empty()) cfg.estimators = default_estimators(cfg.dgp);

  MonteCarloSummary summary;
  summary.config = cfg;
  if (cfg.dgp == 1) {
    const auto t = dgp1_truth(cfg.truth_draws, child_seed(cfg.seed, ~std::uint64_t{0} - 1));
    summary.truth_lb = t.delta_lb;
    summary.truth_ub = t.delta_ub;
    summary.effect = t.effect;
  } else {
    summary.truth_lb = summary.truth_ub = summary.effect = 1.0;
  }

  std::vector<std::vector<RepRecord>> results(cfg.reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < cfg.reps; r = next++) {
      results[r] = detail::run_replication(cfg, r, summary.truth_lb, summary.truth_ub, summary.effect);
    }
  };
  const unsigned threads = std::min<unsigned>(resolve_threads(cfg.threads), static_cast<unsigned>(cfg.reps));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& r : results) {
    for (auto& rec : r) summary.reps.push_back(std::move(rec));
  }
  for (const auto& spec : cfg.estimators) {
    EstimatorSummary s;
    s.estimator = spec.name();
    std::vector<double> lb, ub, se_lb, se_ub;
    std::vector<bool> cl, cu, cs;
    std::size_t above = 0;
    for (const auto& rec : summary.reps) {
      if (rec.estimator != s.estimator) continue;
      if (!rec.flags.empty()) ++s.flagged;
      for (const auto& f : rec.flags) ++s.flag_counts[f];
      if (rec.failed) {
        ++s.failed;
        continue;
      }
      ++s.succeeded;
      lb.push_back(rec.delta_lb);
      ub.push_back(rec.delta_ub);
      above += rec.delta_lb > summary.effect ? 1 : 0;
      if (spec.variance) {
        se_lb.push_back(rec.se_lb);
        se_ub.push_back(rec.se_ub);
        cl.push_back(*rec.covered_lb);
        cu.push_back(*rec.covered_ub);
        cs.push_back(*rec.covered_set);
      }
    }
    s.mean_lb = detail::mean_of(lb);
    s.mean_ub = detail::mean_of(ub);
    s.sd_lb = detail::sample_sd(lb, s.mean_lb);
    s.sd_ub = detail::sample_sd(ub, s.mean_ub);
    if (spec.variance) {
      s.mean_se_lb = detail::mean_of(se_lb);
      s.mean_se_ub = detail::mean_of(se_ub);
      s.coverage_lb = detail::share_true(cl);
      s.coverage_ub = detail::share_true(cu);
      s.coverage_set = detail::share_true(cs);
    }
    s.lb_above_effect = s.succeeded > 0 ? static_cast<double>(above) / static_cast<double>(s.succeeded)
                                        : std::numeric_limits<double>::quiet_NaN();
    summary.estimators.push_back(std::move(s));
  }
  const bool any = std::any_of(summary.estimators.begin(), summary.estimators.end(),
                               [](const EstimatorSummary& s) { return s.succeeded > 0; });
  if (!any) throw EstimationError("every replication failed");
  return summary;
}

// ---------------------------------------------------------------------------
// CSV output

/// 12 significant digits; NaN as NA.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline void write_reps_csv(const MonteCarloSummary& s, std::ostream& out) {
  auto flag = [](const std::optional<bool>& b) -> std::string { return b ? (*b ? "1" : "0") : "NA"; };
  out << "rep,estimator,delta_lb,delta_ub,se_lb,se_ub,covered_lb,covered_ub,covered_set,flags\n";
  for (const auto& r : s.reps) {
    std::string flags;
    for (const auto& f : r.flags) flags += (flags.empty() ? "" : ";") + f;
    out << r.rep << ',' << r.estimator << ',' << format_number(r.delta_lb) << ','
        << format_number(r.delta_ub) << ',' << format_number(r.se_lb) << ',' << format_number(r.se_ub)
        << ',' << flag(r.covered_lb) << ',' << flag(r.covered_ub) << ',' << flag(r.covered_set) << ','
        << flags << '\n';
  }
}

inline void write_summary_csv(const MonteCarloSummary& s, std::ostream& out) {
  out << "estimator,reps,succeeded,failed,mean_lb,mean_ub,sd_lb,sd_ub,mean_se_lb,mean_se_ub,"
         "coverage_lb,coverage_ub,coverage_set,lb_above_effect,flagged,truth_lb,truth_ub\n";
  for (const auto& e : s.estimators) {
    out << e.estimator << ',' << s.config.reps << ',' << e.succeeded << ',' << e.failed << ','
        << format_number(e.mean_lb) << ',' << format_number(e.mean_ub) << ',' << format_number(e.sd_lb)
        << ',' << format_number(e.sd_ub) << ',' << format_number(e.mean_se_lb) << ','
        << format_number(e.mean_se_ub) << ',' << format_number(e.coverage_lb) << ','
        << format_number(e.coverage_ub) << ',' << format_number(e.coverage_set) << ','
        << format_number(e.lb_above_effect) << ',' << e.flagged << ',' << format_number(s.truth_lb)
        << ',' << format_number(s.truth_ub) << '\n';
  }
}

}  // namespace strata_bounds
