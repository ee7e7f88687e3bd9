#pragma once

// Mass-exact trimmed means. Sorting by value, mass q is removed from one
// tail; the boundary order statistic keeps a fractional weight so exactly
// (1-q)*K units of mass remain. Tied boundary values share that weight.

#include <algorithm>
#include <span>
#include <vector>

#include "strata_bounds/errors.hpp"

namespace strata_bounds {

enum class TrimSide {
  upper_tail,  // drop the largest values (lower bound)
  lower_tail,  // drop the smallest values (upper bound)
};

struct TrimResult {
  double mean = 0.0;
  double cutoff = 0.0;          // boundary value: y_{1-q} (upper_tail) or y_q (lower_tail)
  double retained_mass = 0.0;   // (1-q) * K
  std::size_t at_cutoff = 0;    // units tied at the cutoff value
};

/// Trims to `keep_fraction` of the mass. Takes the kept fraction rather than
/// q so callers holding an exact ratio avoid the 1-(1-r) round trip.
inline TrimResult trim_keep(std::span<const double> values, double keep_fraction, TrimSide side) {
  if (values.empty()) throw EstimationError("trimmed mean of an empty sample");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw DegenerateTrimError("trimming share outside [0,1)");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double keep = keep_fraction * static_cast<double>(sorted.size());
  if (keep < 1.0) {
    throw DegenerateTrimError("retained mass " + std::to_string(keep) +
                              " is below one observation");
  }

  // Tie groups in ascending order; mass is taken from the kept end.
  struct Group {
    double value;
    std::size_t count;
    double take = 0.0;
  };
  std::vector<Group> groups;
  for (double v : sorted) {
    if (groups.empty() || groups.back().value != v) groups.push_back({v, 0});
    ++groups.back().count;
  }
  TrimResult out;
  out.retained_mass = keep;
  double remaining = keep;
  const double residue = 1e-12 * keep;
  auto take_from = [&](Group& g) {
    if (remaining <= residue) return;
    g.take = std::min(static_cast<double>(g.count), remaining);
    remaining -= g.take;
    out.cutoff = g.value;
    out.at_cutoff = g.count;
  };
  if (side == TrimSide::upper_tail) {
    for (auto& g : groups) take_from(g);
  } else {
    for (auto it = groups.rbegin(); it != groups.rend(); ++it) take_from(*it);
  }
  // Summing in ascending order on both sides makes the two tails agree
  // bitwise when nothing is trimmed.
  double sum = 0.0;
  for (const auto& g : groups) sum += g.take * g.value;
  out.mean = sum / keep;
  return out;
}

inline TrimResult trim(std::span<const double> values, double q, TrimSide side) {
  if (!(q >= 0.0) || q >= 1.0) throw DegenerateTrimError("trimming share outside [0,1)");
  return trim_keep(values, 1.0 - q, side);
}

/// Mean after removing mass q from the chosen tail.
inline double trimmed_mean(std::span<const double> values, double q, TrimSide side) {
  return trim(values, q, side).mean;
}

}  // namespace strata_bounds
