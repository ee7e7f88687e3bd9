#pragma once

// Command-line front end: `estimate` on a CSV file and `simulate` runs.
// Exit codes: 0 success, 1 invalid input or I/O failure, 2 estimation failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "strata_bounds/bounds.hpp"
#include "strata_bounds/data_model.hpp"
#include "strata_bounds/errors.hpp"
#include "strata_bounds/ipw_estimator.hpp"
#include "strata_bounds/lee_estimator.hpp"
#include "strata_bounds/simulation.hpp"
#include "strata_bounds/variance.hpp"

namespace strata_bounds::cli {

enum ExitCode : int { kOk = 0, kInvalid = 1, kEstimation = 2 };

struct EstimateRequest {
  std::string input;
  std::string estimator = "all";  // lee | conditional-lee | lee-ipw | all
  std::string variance = "design";  // design | iid | label | none
  double alpha = 0.05;
  bool reverse_monotonicity = false;
  std::string format = "json";  // json | csv | table
};

struct SimulateRequest {
  int dgp = 1;
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  std::size_t n = 10000;
  std::string out;
  double alpha = 0.05;
  unsigned threads = 0;
  std::size_t truth_draws = 10'000'000;
};

/// One estimator's point estimate and, when requested and defined, variance.
struct EstimateResult {
  BoundsEstimate bounds;
  std::optional<VarianceReport> variance;
  std::string variance_note;  // why variance is absent
};

// ---------------------------------------------------------------------------
// Estimation

namespace detail {

inline Interval negate(const Interval& i) { return {-i.hi, -i.lo}; }

/// Maps results computed with d := 1-d back to the original effect sign:
/// [L', U'] becomes [-U', -L'].
inline void back_transform(EstimateResult& r) {
  auto& b = r.bounds;
  const double lb = b.delta_lb, ub = b.delta_ub;
  b.delta_lb = -ub;
  b.delta_ub = -lb;
  b.arms_swapped = true;
  if (r.variance) {
    auto& v = *r.variance;
    std::swap(v.lb, v.ub);
    std::swap(v.se_lb, v.se_ub);
    const auto ci = v.ci;
    v.ci.lb = negate(ci.ub);
    v.ci.ub = negate(ci.lb);
    v.ci.set = negate(ci.set);
  }
}

inline std::vector<BoundsMethod> requested_methods(const std::string& e) {
  if (e == "lee") return {BoundsMethod::lee};
  if (e == "conditional-lee") return {BoundsMethod::conditional_lee};
  if (e == "lee-ipw") return {BoundsMethod::lee_ipw};
  if (e == "all") return {BoundsMethod::lee, BoundsMethod::conditional_lee, BoundsMethod::lee_ipw};
  throw ValidationError("unknown estimator '" + e + "'");
}

inline std::optional<VarianceMethod> requested_variance(const std::string& v) {
  if (v == "design") return VarianceMethod::design;
  if (v == "iid") return VarianceMethod::iid;
  if (v == "label") return VarianceMethod::label;
  if (v == "none") return std::nullopt;
  throw ValidationError("unknown variance '" + v + "'");
}

}  // namespace detail

/// Runs the requested estimators. Throws ValidationError / EstimationError.
inline std::vector<EstimateResult> estimate(const Dataset& original, const EstimateRequest& req) {
  const auto methods = detail::requested_methods(req.estimator);
  const auto vmethod = detail::requested_variance(req.variance);
  if (!(req.alpha > 0.0 && req.alpha < 0.5)) throw ValidationError("alpha must lie in (0, 0.5)");
  const Dataset data = req.reverse_monotonicity ? original.with_arms_swapped() : original;

  std::optional<BlockDesign> design;
  auto need_design = [&]() -> const BlockDesign& {
    if (!design) design = block_design(data);
    return *design;
  };
  // Every estimator except pooled Lee needs both arms in every block; the
  // variance estimators always do.
  if (vmethod || methods.size() > 1 || methods.front() != BoundsMethod::lee) need_design();

  std::vector<EstimateResult> out;
  for (auto m : methods) {
    EstimateResult r;
    switch (m) {
      case BoundsMethod::lee: r.bounds = lee_bounds(data); break;
      case BoundsMethod::conditional_lee: r.bounds = conditional_lee_bounds(data, need_design()); break;
      case BoundsMethod::lee_ipw: r.bounds = lee_ipw_bounds(data, need_design()); break;
    }
    if (!vmethod) {
      r.variance_note = "not requested";
    } else if (m == BoundsMethod::conditional_lee) {
      r.variance_note = "no variance estimator is defined for conditional Lee bounds";
    } else {
      r.variance = estimate_variance(data, need_design(), r.bounds, *vmethod, req.alpha);
    }
    if (req.reverse_monotonicity) detail::back_transform(r);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

/// Rounds to 12 significant digits; non-finite values become null.
inline nlohmann::json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(number(m(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json vector_json(const Vector5& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

inline nlohmann::json interval_json(const Interval& i) { return {number(i.lo), number(i.hi)}; }

inline const char* theta_names(MomentSystem s) {
  return is_ipw(s) ? "mu1,mu0,cutoff,delta,q" : "delta,mu0,p,alpha,cutoff";
}

inline nlohmann::json bound_inference_json(const BoundInference& b) {
  nlohmann::json j;
  j["system"] = to_string(b.fit.system);
  j["theta_names"] = theta_names(b.fit.system);
  j["theta"] = vector_json(b.fit.theta);
  j["moment_residual"] = vector_json(b.fit.residual);
  j["bandwidth"] = number(b.bandwidth);
  j["jacobian"] = matrix_json(b.jacobian);
  j["omega"] = matrix_json(b.omega);
  j["v_hat"] = matrix_json(b.v_hat);
  j["sigma2"] = number(b.se.sigma2);
  j["non_psd"] = b.se.non_psd;
  if (b.meat) {
    const auto& m = *b.meat;
    j["meat"] = {{"a1", matrix_json(m.a1)},           {"a0", matrix_json(m.a0)},
                 {"a3", matrix_json(m.a3)},           {"zeta_10", matrix_json(m.zeta_10)},
                 {"zeta_11", matrix_json(m.zeta_11)}, {"zeta_00", matrix_json(m.zeta_00)},
                 {"b_n", matrix_json(m.b_n)},
                 {"singleton_blocks", {{"treated", m.singleton_blocks[1]}, {"control", m.singleton_blocks[0]}}},
                 {"out_of_set_partners",
                  {{"treated", m.out_of_set_partners[1]}, {"control", m.out_of_set_partners[0]}}}};
  }
  return j;
}

inline nlohmann::json result_json(const EstimateResult& r) {
  const auto& b = r.bounds;
  nlohmann::json j;
  j["estimator"] = to_string(b.method);
  j["delta_lb"] = number(b.delta_lb);
  j["delta_ub"] = number(b.delta_ub);
  j["mu0"] = number(b.mu0);
  j["mu1_lb"] = number(b.mu1_lb);
  j["mu1_ub"] = number(b.mu1_ub);
  j["q"] = number(b.q);
  j["q_raw"] = number(b.q_raw);
  j["cutoff_lb"] = number(b.cutoff_lb);
  j["cutoff_ub"] = number(b.cutoff_ub);
  j["n_used"] = {{"treated", b.n_used.treated},
                 {"control", b.n_used.control},
                 {"treated_observed", b.n_used.treated_observed},
                 {"control_observed", b.n_used.control_observed}};
  j["flags"] = {{"monotonicity_violated", b.monotonicity_violated},
                {"heterogeneous_shares", b.heterogeneous_shares},
                {"arms_swapped", b.arms_swapped},
                {"strata_dropped", b.strata_dropped},
                {"non_psd", r.variance ? r.variance->non_psd : false},
                {"degenerate_ci", r.variance ? r.variance->ci.degenerate : false}};
  j["warnings"] = b.warnings;
  if (b.method == BoundsMethod::conditional_lee) {
    j["aggregation_weight"] = b.aggregation_weight;
    auto strata = nlohmann::json::array();
    for (const auto& s : b.strata) {
      nlohmann::json c{{"label", s.label}, {"n", s.n_g}, {"ok", s.ok}};
      if (s.ok) {
        c["tau"] = number(s.tau);
        c["tau_raw"] = number(s.tau_raw);
        c["mu0"] = number(s.mu0);
        c["mu1_lb"] = number(s.mu1_lb);
        c["mu1_ub"] = number(s.mu1_ub);
      } else {
        c["failure"] = s.failure;
      }
      strata.push_back(std::move(c));
    }
    j["strata"] = std::move(strata);
  }
  if (b.method == BoundsMethod::lee_ipw) {
    const auto& c = b.ipw;
    auto wc = nlohmann::json::array(), wq = nlohmann::json::array();
    for (double w : c.w_c) wc.push_back(number(w));
    for (double w : c.w_q) wq.push_back(number(w));
    j["ipw"] = {{"p_hat", number(c.p_hat)},         {"delta_hat", number(c.delta_hat)},
                {"q_hat", number(c.q_hat)},         {"q_raw", number(c.q_raw)},
                {"cutoff_lo", number(c.cutoff_lo)}, {"cutoff_hi", number(c.cutoff_hi)},
                {"w_c", std::move(wc)},             {"w_q", std::move(wq)}};
  }
  if (r.variance) {
    const auto& v = *r.variance;
    nlohmann::json vj;
    vj["method"] = to_string(v.method);
    vj["alpha"] = number(v.alpha);
    vj["se_lb"] = number(v.se_lb);
    vj["se_ub"] = number(v.se_ub);
    vj["ci_lb"] = interval_json(v.ci.lb);
    vj["ci_ub"] = interval_json(v.ci.ub);
    vj["ci_set"] = interval_json(v.ci.set);
    vj["z"] = number(v.ci.z);
    vj["critical_value"] = number(v.ci.critical_value);
    vj["lower"] = bound_inference_json(v.lb);
    vj["upper"] = bound_inference_json(v.ub);
    if (v.label) {
      vj["label_variance"] = {{"v", number(v.label->v)},
                              {"rho_11", number(v.label->rho_11)},
                              {"rho_00", number(v.label->rho_00)},
                              {"rho_10", number(v.label->rho_10)}};
    }
    j["variance"] = std::move(vj);
  } else {
    j["variance"] = nullptr;
    j["variance_note"] = r.variance_note;
  }
  return j;
}

inline nlohmann::json report_json(const Dataset& data, const EstimateRequest& req,
                                  const std::vector<EstimateResult>& results) {
  nlohmann::json j;
  j["input"] = req.input;
  j["n"] = data.size();
  j["alpha"] = number(req.alpha);
  j["variance"] = req.variance;
  j["reverse_monotonicity"] = req.reverse_monotonicity;
  try {
    const auto design = block_design(data);
    j["blocks"] = design.block_count();
    j["p_hat"] = number(design.p_hat);
    j["equal_shares"] = design.equal_shares();
    j["design_warnings"] = design_warnings(design);
  } catch (const ValidationError& e) {
    j["blocks"] = nullptr;
    j["design_warnings"] = {e.what()};
  }
  auto arr = nlohmann::json::array();
  for (const auto& r : results) arr.push_back(result_json(r));
  j["results"] = std::move(arr);
  return j;
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += (c == '"') ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string flag_list(const EstimateResult& r) {
  std::vector<std::string> f;
  const auto& b = r.bounds;
  if (b.monotonicity_violated) f.push_back("monotonicity_violated");
  if (b.heterogeneous_shares) f.push_back("heterogeneous_shares");
  if (b.arms_swapped) f.push_back("arms_swapped");
  if (b.strata_dropped > 0) f.push_back("strata_dropped=" + std::to_string(b.strata_dropped));
  if (r.variance && r.variance->non_psd) f.push_back("non_psd");
  if (r.variance && r.variance->ci.degenerate) f.push_back("degenerate_ci");
  std::string s;
  for (const auto& x : f) s += (s.empty() ? "" : ";") + x;
  return s;
}

}  // namespace detail

inline void write_csv_report(const std::vector<EstimateResult>& results, std::ostream& out) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  out << "estimator,delta_lb,delta_ub,mu0,mu1_lb,mu1_ub,q,q_raw,variance,se_lb,se_ub,"
         "ci_lb_lo,ci_lb_hi,ci_ub_lo,ci_ub_hi,ci_set_lo,ci_set_hi,flags,warnings\n";
  for (const auto& r : results) {
    const auto& b = r.bounds;
    const auto* v = r.variance ? &*r.variance : nullptr;
    std::string warnings;
    for (const auto& w : b.warnings) warnings += (warnings.empty() ? "" : "; ") + w;
    out << to_string(b.method) << ',' << format_number(b.delta_lb) << ',' << format_number(b.delta_ub)
        << ',' << format_number(b.mu0) << ',' << format_number(b.mu1_lb) << ','
        << format_number(b.mu1_ub) << ',' << format_number(b.q) << ',' << format_number(b.q_raw) << ','
        << (v ? to_string(v->method) : "none") << ',' << format_number(v ? v->se_lb : nan) << ','
        << format_number(v ? v->se_ub : nan) << ',' << format_number(v ? v->ci.lb.lo : nan) << ','
        << format_number(v ? v->ci.lb.hi : nan) << ',' << format_number(v ? v->ci.ub.lo : nan) << ','
        << format_number(v ? v->ci.ub.hi : nan) << ',' << format_number(v ? v->ci.set.lo : nan) << ','
        << format_number(v ? v->ci.set.hi : nan) << ',' << detail::flag_list(r) << ','
        << detail::csv_quote(warnings) << '\n';
  }
}

inline void write_table_report(const std::vector<EstimateResult>& results, std::ostream& out) {
  auto cell = [](double v) { return format_number(v); };
  out << std::left << std::setw(16) << "estimator" << std::setw(19) << "delta_lb" << std::setw(19)
      << "delta_ub" << std::setw(19) << "q" << std::setw(19) << "se_lb" << std::setw(19) << "se_ub"
      << "ci_set\n";
  for (const auto& r : results) {
    const auto& b = r.bounds;
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    const auto* v = r.variance ? &*r.variance : nullptr;
    out << std::left << std::setw(16) << to_string(b.method) << std::setw(19) << cell(b.delta_lb)
        << std::setw(19) << cell(b.delta_ub) << std::setw(19) << cell(b.q) << std::setw(19)
        << cell(v ? v->se_lb : nan) << std::setw(19) << cell(v ? v->se_ub : nan);
    if (v) {
      out << '[' << cell(v->ci.set.lo) << ", " << cell(v->ci.set.hi) << ']';
    } else {
      out << '-';
    }
    out << '\n';
  }
  for (const auto& r : results) {
    const auto flags = detail::flag_list(r);
    if (!flags.empty()) out << to_string(r.bounds.method) << " flags: " << flags << '\n';
    for (const auto& w : r.bounds.warnings) out << to_string(r.bounds.method) << " warning: " << w << '\n';
  }
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_estimate(const EstimateRequest& req, std::ostream& out, std::ostream& err) {
  try {
    if (req.format != "json" && req.format != "csv" && req.format != "table") {
      throw ValidationError("unknown format '" + req.format + "'");
    }
    const Dataset data = parse_csv(req.input);
    const auto results = estimate(data, req);
    if (req.format == "json") {
      out << report_json(data, req, results).dump(2) << '\n';
    } else if (req.format == "csv") {
      write_csv_report(results, out);
    } else {
      write_table_report(results, out);
    }
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const EstimationError& e) {
    err << "estimation error: " << e.what() << '\n';
    return kEstimation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  }
}

namespace detail {

/// Writes via a temporary file in the same directory and renames on success.
template <typename Writer>
void write_atomically(const std::filesystem::path& path, Writer&& write) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    write(f);
    f.flush();
    if (!f) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline void write_summary_table(const MonteCarloSummary& s, std::ostream& out) {
  out << "dgp " << s.config.dgp << ", reps " << s.config.reps << ", seed " << s.config.seed;
  if (s.config.dgp == 1) out << ", n " << s.config.n;
  out << "\ntruth: lb " << format_number(s.truth_lb) << ", ub " << format_number(s.truth_ub)
      << ", effect " << format_number(s.effect) << '\n';
  out << std::left << std::setw(24) << "estimator" << std::setw(19) << "mean_lb" << std::setw(19)
      << "sd_lb" << std::setw(19) << "mean_se_lb" << std::setw(13) << "cover_lb" << std::setw(13)
      << "cover_set" << std::setw(13) << "lb>effect" << "failed\n";
  for (const auto& e : s.estimators) {
    out << std::left << std::setw(24) << e.estimator << std::setw(19) << format_number(e.mean_lb)
        << std::setw(19) << format_number(e.sd_lb) << std::setw(19) << format_number(e.mean_se_lb)
        << std::setw(13) << format_number(e.coverage_lb) << std::setw(13) << format_number(e.coverage_set)
        << std::setw(13) << format_number(e.lb_above_effect) << e.failed << '\n';
  }
}

inline int cmd_simulate(const SimulateRequest& req, std::ostream& out, std::ostream& err) {
  try {
    McConfig cfg;
    cfg.dgp = req.dgp;
    cfg.reps = req.reps;
    cfg.seed = req.seed;
    cfg.n = req.n;
    cfg.alpha = req.alpha;
    cfg.threads = req.threads;
    cfg.truth_draws = req.truth_draws;
    if (req.out.empty()) throw ValidationError("--out is required");
    const auto summary = monte_carlo(cfg);

    const std::filesystem::path dir(req.out);
    std::filesystem::create_directories(dir);
    detail::write_atomically(dir / "replications.csv", [&](std::ostream& f) { write_reps_csv(summary, f); });
    detail::write_atomically(dir / "summary.csv", [&](std::ostream& f) { write_summary_csv(summary, f); });
    write_summary_table(summary, out);
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const EstimationError& e) {
    err << "estimation error: " << e.what() << '\n';
    return kEstimation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  }
}

/// Parses argv and dispatches to a subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Lee, conditional Lee and Lee-IPW bounds for stratified experiments with attrition",
               "strata_bounds"};
  app.require_subcommand(1);

  EstimateRequest est;
  auto* e = app.add_subcommand("estimate", "Estimate bounds from a CSV file (y,s,d,block[,x1..xk])");
  e->add_option("--input", est.input, "Input CSV")->required();
  e->add_option("--estimator", est.estimator, "Estimator")
      ->check(CLI::IsMember({"lee", "conditional-lee", "lee-ipw", "all"}))
      ->capture_default_str();
  e->add_option("--variance", est.variance, "Variance estimator")
      ->check(CLI::IsMember({"design", "iid", "label", "none"}))
      ->capture_default_str();
  e->add_option("--alpha", est.alpha, "Confidence level is 1 - alpha")
      ->check(CLI::Range(1e-12, 0.5 - 1e-12))
      ->capture_default_str();
  e->add_flag("--reverse-monotonicity", est.reverse_monotonicity,
              "Treatment lowers selection: trim the control arm instead");
  e->add_option("--format", est.format, "Output format")
      ->check(CLI::IsMember({"json", "csv", "table"}))
      ->capture_default_str();

  SimulateRequest sim;
  auto* s = app.add_subcommand("simulate", "Run a Monte Carlo study");
  s->add_option("--dgp", sim.dgp, "Design: 1 matched pairs, 2 heavy tails")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  s->add_option("--reps", sim.reps, "Replications")->required()->check(CLI::PositiveNumber);
  s->add_option("--seed", sim.seed, "Seed")->required();
  s->add_option("--n", sim.n, "Sample size (design 1 only, even)")->capture_default_str();
  s->add_option("--out", sim.out, "Output directory")->required();
  s->add_option("--alpha", sim.alpha, "Confidence level is 1 - alpha")
      ->check(CLI::Range(1e-12, 0.5 - 1e-12))
      ->capture_default_str();
  s->add_option("--threads", sim.threads, "Worker threads (0: all cores)")->capture_default_str();
  s->add_option("--truth-draws", sim.truth_draws, "Draws for the design 1 population bounds")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& ex) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kInvalid;
  }
  if (e->parsed()) return cmd_estimate(est, out, err);
  return cmd_simulate(sim, out, err);
}

}  // namespace strata_bounds::cli
