#pragma once

// Per-stage noise schedules.
//
// Bridge-family kinds (linear, log, bridge) describe the marginal
//   x_t = alpha_t * x0 + (1 - alpha_t) * y + sqrt(sigma2_t) * eps
// with alpha_0 = 1 and alpha_T = 0. The ddpm-linear kind stores the per-step
// alpha_t = 1 - beta_t, sigma2_t = beta_t and the cumulative product alphabar_t.

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"

namespace toddler {

enum class ScheduleKind { linear, log, bridge, ddpm_linear };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::log: return "log";
    case ScheduleKind::bridge: return "bridge";
    case ScheduleKind::ddpm_linear: return "ddpm-linear";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "log") return ScheduleKind::log;
  if (s == "bridge") return ScheduleKind::bridge;
  if (s == "ddpm-linear") return ScheduleKind::ddpm_linear;
  throw Error(ErrorKind::config, "unknown schedule kind '" + std::string(s) + "'");
}

inline bool is_bridge_family(ScheduleKind k) { return k != ScheduleKind::ddpm_linear; }

inline constexpr double kInfiniteSnr = std::numeric_limits<double>::infinity();

struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 0;  // T
  std::vector<double> alpha;     // T+1
  std::vector<double> sigma2;    // T+1
  std::vector<double> alphabar;  // T+1, ddpm-linear only
  double peak_variance = 1.0;
  double bridge_factor = 1.0;

  /// Weight of x0 in the forward marginal (alphabar for ddpm-linear).
  double signal(int t) const { return kind == ScheduleKind::ddpm_linear ? alphabar[t] : alpha[t]; }
  /// Variance of the forward marginal.
  double marginal_variance(int t) const {
    return kind == ScheduleKind::ddpm_linear ? 1.0 - alphabar[t] : sigma2[t];
  }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int steps, double peak_variance = 1.0,
                                   double bridge_factor = 1.0) {
  require(steps >= 1, ErrorKind::invalid_argument, "make_schedule: T must be >= 1");
  require(peak_variance > 0.0 && peak_variance <= 1.0, ErrorKind::invalid_argument,
          "make_schedule: peak_variance must be in (0,1]");
  require(bridge_factor > 0.0, ErrorKind::invalid_argument, "make_schedule: bridge_factor must be > 0");

  NoiseSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.peak_variance = peak_variance;
  s.bridge_factor = bridge_factor;
  s.alpha.resize(steps + 1);
  s.sigma2.resize(steps + 1);
  const double T = steps;

  switch (kind) {
    case ScheduleKind::linear:
      for (int t = 0; t <= steps; ++t) {
        s.alpha[t] = 1.0 - t / T;
        s.sigma2[t] = peak_variance * (1.0 - s.alpha[t]);
      }
      break;
    case ScheduleKind::log:
      for (int t = 0; t <= steps; ++t) {
        s.alpha[t] = 1.0 - std::log1p(static_cast<double>(t)) / std::log1p(T);
        s.sigma2[t] = peak_variance * (1.0 - s.alpha[t]);
      }
      break;
    case ScheduleKind::bridge:
      for (int t = 0; t <= steps; ++t) {
        s.alpha[t] = 1.0 - t / T;
        s.sigma2[t] = peak_variance * bridge_factor * (s.alpha[t] - s.alpha[t] * s.alpha[t]);
      }
      break;
    case ScheduleKind::ddpm_linear: {
      // beta linear in [1e-4, 0.02], then rescaled so alphabar_T = 0 exactly
      // (zero terminal SNR) while keeping alphabar_1 unchanged.
      s.peak_variance = 1.0;
      s.alphabar.resize(steps + 1);
      std::vector<double> sqrt_ab(steps + 1);
      sqrt_ab[0] = 1.0;
      double ab = 1.0;
      for (int t = 1; t <= steps; ++t) {
        const double beta = steps == 1 ? 1e-4 : 1e-4 + (0.02 - 1e-4) * (t - 1) / (T - 1);
        ab *= 1.0 - beta;
        sqrt_ab[t] = std::sqrt(ab);
      }
      const double first = sqrt_ab[1];
      const double last = sqrt_ab[steps];
      s.alphabar[0] = 1.0;
      for (int t = 1; t <= steps; ++t) {
        const double r = steps == 1 ? 0.0 : (sqrt_ab[t] - last) * first / (first - last);
        s.alphabar[t] = r * r;
      }
      s.alphabar[steps] = 0.0;
      s.alpha[0] = 1.0;
      s.sigma2[0] = 0.0;
      for (int t = 1; t <= steps; ++t) {
        s.alpha[t] = s.alphabar[t] / s.alphabar[t - 1];
        s.sigma2[t] = 1.0 - s.alpha[t];
      }
      break;
    }
  }
  if (is_bridge_family(kind)) {
    s.alpha[steps] = 0.0;
    s.sigma2[0] = 0.0;
  }
  return s;
}

/// Signal-to-noise ratio of the forward marginal at t. Returns kInfiniteSnr
/// when the marginal variance is zero and the signal weight is positive; a
/// zero signal weight gives 0.
inline double snr(const NoiseSchedule& s, int t) {
  require(t >= 0 && t <= s.steps, ErrorKind::out_of_range, "snr: t out of range");
  const double signal = s.signal(t);
  const double var = s.marginal_variance(t);
  if (signal == 0.0) return 0.0;
  if (var == 0.0) return kInfiniteSnr;
  return signal / var;
}

/// Empty iff every schedule invariant holds.
inline std::vector<std::string> validate(const NoiseSchedule& s) {
  std::vector<std::string> issues;
  const auto n = static_cast<std::size_t>(s.steps) + 1;
  if (s.steps < 1) issues.push_back("T must be >= 1");
  if (s.alpha.size() != n || s.sigma2.size() != n) {
    issues.push_back("alpha/sigma2 must have T+1 entries");
    return issues;
  }
  if (!(s.peak_variance > 0.0 && s.peak_variance <= 1.0)) issues.push_back("peak_variance outside (0,1]");
  for (std::size_t t = 0; t < n; ++t)
    if (!std::isfinite(s.alpha[t]) || !std::isfinite(s.sigma2[t]))
      issues.push_back("non-finite value at t=" + std::to_string(t));

  if (s.alpha[0] != 1.0) issues.push_back("alpha_0 must be 1");
  if (is_bridge_family(s.kind) && s.alpha[n - 1] != 0.0) issues.push_back("alpha_T must be 0");
  for (std::size_t t = 1; t < n; ++t)
    if (!(s.alpha[t] < s.alpha[t - 1]))
      issues.push_back("alpha not strictly decreasing at t=" + std::to_string(t));

  if (s.sigma2[0] != 0.0) issues.push_back("sigma2_0 must be 0");
  double peak = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (s.sigma2[t] < 0.0) issues.push_back("sigma2 negative at t=" + std::to_string(t));
    peak = std::max(peak, s.sigma2[t]);
  }
  const double bound = s.kind == ScheduleKind::bridge ? s.peak_variance * s.bridge_factor * 0.25 : s.peak_variance;
  if (peak > bound + 1e-12) issues.push_back("max sigma2 exceeds the peak variance");

  constexpr double tol = 1e-12;
  switch (s.kind) {
    case ScheduleKind::linear:
    case ScheduleKind::log:
      for (std::size_t t = 0; t < n; ++t)
        if (std::abs(s.sigma2[t] - s.peak_variance * (1.0 - s.alpha[t])) > tol)
          issues.push_back("sigma2 != peak*(1-alpha) at t=" + std::to_string(t));
      break;
    case ScheduleKind::bridge:
      if (s.sigma2[n - 1] != 0.0) issues.push_back("bridge sigma2_T must be 0");
      for (std::size_t t = 0; t < n; ++t) {
        const double a = s.alpha[t];
        if (std::abs(s.sigma2[t] - s.peak_variance * s.bridge_factor * (a - a * a)) > tol)
          issues.push_back("sigma2 != scale*(alpha-alpha^2) at t=" + std::to_string(t));
      }
      break;
    case ScheduleKind::ddpm_linear: {
      if (s.alphabar.size() != n) {
        issues.push_back("alphabar must have T+1 entries");
        break;
      }
      double prod = 1.0;
      for (std::size_t t = 0; t < n; ++t) {
        if (t > 0) prod *= s.alpha[t];
        if (std::abs(prod - s.alphabar[t]) > tol)
          issues.push_back("alphabar != cumulative product at t=" + std::to_string(t));
        if (std::abs(s.sigma2[t] - (1.0 - s.alpha[t])) > tol)
          issues.push_back("sigma2 != 1-alpha at t=" + std::to_string(t));
      }
      break;
    }
  }
  return issues;
}

/// t,alpha,sigma2,snr rows for plotting.
inline std::string schedule_csv(const NoiseSchedule& s) {
  std::ostringstream os;
  os.precision(17);
  os << "t,alpha,sigma2,snr\n";
  for (int t = 0; t <= s.steps; ++t) {
    const double r = snr(s, t);
    os << t << ',' << s.alpha[t] << ',' << s.sigma2[t] << ',';
    if (std::isinf(r))
      os << "inf";
    else
      os << r;
    os << '\n';
  }
  return os.str();
}

}  // namespace toddler
