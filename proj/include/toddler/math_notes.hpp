#pragma once

// MATH_NOTES: side-by-side reverse posteriors per t, oracle conditioning vs
// the printed closed form (both readings of its x0 coefficient).

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "bridge.hpp"
#include "schedule.hpp"

namespace toddler {

struct PosteriorRow {
  int t = 0;
  PosteriorCoefficients oracle, printed, factored;
  double max_coeff_gap = 0;  // max over the three coefficients, printed vs oracle
  double variance_gap = 0;   // printed - oracle
};

inline std::vector<PosteriorRow> posterior_table(const NoiseSchedule& s) {
  std::vector<PosteriorRow> rows;
  for (int t = 1; t <= s.steps; ++t) {
    PosteriorRow r;
    r.t = t;
    r.oracle = oracle_coefficients(s, t, t - 1);
    r.printed = paper_literal_coefficients(s, t, t - 1, X0Parse::as_printed);
    r.factored = paper_literal_coefficients(s, t, t - 1, X0Parse::factored);
    r.max_coeff_gap = std::max({std::abs(r.printed.c_xt - r.oracle.c_xt), std::abs(r.printed.c_x0 - r.oracle.c_x0),
                                std::abs(r.printed.c_y - r.oracle.c_y)});
    r.variance_gap = r.printed.variance - r.oracle.variance;
    rows.push_back(r);
  }
  return rows;
}

namespace detail {
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace detail

/// Markdown report for the given schedules. `extra` is appended verbatim
/// (Monte Carlo checks, when the caller has them).
inline std::string math_notes(const std::vector<NoiseSchedule>& schedules, const std::string& extra = {}) {
  std::ostringstream o;
  o << "# MATH_NOTES\n\n"
    << "Reverse posterior q(x_{t-1} | x_t, x0, y) for the bridge forward process\n"
    << "x_t = alpha_t x0 + (1 - alpha_t) y + sigma_t eps.\n\n"
    << "## Oracle\n\n"
    << "Read the marginals as a Gaussian Markov chain with s_t = alpha_t, w_t = 1 - alpha_t, v_t = sigma2_t and\n"
    << "transition factor a = s_t / s_{t-1}. Conditioning the joint of (x_{t-1}, x_t) gives\n\n"
    << "    k = a v_{t-1} / v_t\n"
    << "    c_xt = k,  c_x0 = s_{t-1} - k s_t,  c_y = w_{t-1} - k w_t\n"
    << "    var  = v_{t-1} - a^2 v_{t-1}^2 / v_t\n\n"
    << "The coefficients sum to 1 and the variance is non-negative whenever the chain exists\n"
    << "(v_t >= a^2 v_{t-1}).\n\n"
    << "## Printed form\n\n"
    << "The printed mean uses ratio r = sigma2_{t-1}/sigma2_t and g = (1 - alpha_t)/(1 - alpha_{t-1}):\n\n"
    << "    c_xt = r g,  c_y = alpha_{t-1} - alpha_t g r,  var = sigma2_{t-1} (1 - r g^2)\n"
    << "    c_x0 = 1 - alpha_{t-1}(1 - r g^2)   (as printed)\n"
    << "    c_x0 = (1 - alpha_{t-1})(1 - r g^2) (factored reading)\n\n"
    << "These equal the conditioning formulas of a chain whose transition scales by g, i.e. with\n"
    << "the roles of x0 and y exchanged. With the factored reading the coefficients match that\n"
    << "chain exactly; neither reading matches the oracle for these schedules, and for the linear\n"
    << "kind the printed variance is negative. Sampling clamps it at 0 when that form is selected.\n\n";

  for (const auto& s : schedules) {
    const auto rows = posterior_table(s);
    o << "## " << to_string(s.kind) << ", T=" << s.steps << ", peak=" << s.peak_variance << "\n\n"
      << "| t | oracle c_xt | oracle c_x0 | oracle c_y | oracle var | oracle sum | printed c_xt | printed c_x0 | "
         "factored c_x0 | printed c_y | printed var | printed sum | max coeff gap | var gap |\n"
      << "|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    int negative = 0;
    double worst = 0;
    for (const auto& r : rows) {
      o << "| " << r.t << " | " << detail::fmt(r.oracle.c_xt) << " | " << detail::fmt(r.oracle.c_x0) << " | "
        << detail::fmt(r.oracle.c_y) << " | " << detail::fmt(r.oracle.variance) << " | " << detail::fmt(r.oracle.sum())
        << " | " << detail::fmt(r.printed.c_xt) << " | " << detail::fmt(r.printed.c_x0) << " | "
        << detail::fmt(r.factored.c_x0) << " | " << detail::fmt(r.printed.c_y) << " | "
        << detail::fmt(r.printed.variance) << " | " << detail::fmt(r.printed.sum()) << " | "
        << detail::fmt(r.max_coeff_gap) << " | " << detail::fmt(r.variance_gap) << " |\n";
      negative += r.printed.variance < 0;
      worst = std::max(worst, r.max_coeff_gap);
    }
    o << "\nLargest coefficient gap: " << detail::fmt(worst) << ". Steps with negative printed variance: " << negative
      << " of " << s.steps << ".\n\n";
  }
  o << extra;
  return o.str();
}

}  // namespace toddler
