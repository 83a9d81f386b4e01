#pragma once

// Forward marginals, reverse posteriors and ELBO diagnostics for the staged
// bridge process, plus the DDPM baseline.
//
// Posterior construction ("oracle-derived"). Each schedule is read as a
// Gaussian Markov chain whose marginals are
//     x_t ~ N(s_t x0 + w_t y, v_t)
// (bridge family: s = alpha, w = 1 - alpha, v = sigma2; ddpm: s = sqrt(alphabar),
// w = 0, v = 1 - alphabar), with transition
//     x_t = a x_u + (w_t - a w_u) y + N(0, v_t - a^2 v_u),   a = s_t / s_u,  u < t.
// Then Cov(x_u, x_t) = a v_u, and conditioning gives
//     E[x_u | x_t] = c_xt x_t + c_x0 x0 + c_y y,  k = a v_u / v_t,
//     c_xt = k,  c_x0 = s_u - k s_t,  c_y = w_u - k w_t,
//     Var[x_u | x_t] = v_u - a^2 v_u^2 / v_t.
// For the bridge family the three coefficients sum to one, so constants are
// preserved. The printed closed form ("paper-literal") is kept alongside for
// comparison; see math_notes.hpp.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "degrade.hpp"
#include "schedule.hpp"

namespace toddler {

enum class CoefficientSource { paper_literal, oracle_derived };

inline std::string to_string(CoefficientSource s) {
  return s == CoefficientSource::paper_literal ? "paper-literal" : "oracle-derived";
}

inline CoefficientSource parse_coefficient_source(std::string_view s) {
  if (s == "paper-literal") return CoefficientSource::paper_literal;
  if (s == "oracle-derived") return CoefficientSource::oracle_derived;
  throw Error(ErrorKind::config, "unknown coefficient source '" + std::string(s) + "'");
}

/// The x0 coefficient of the printed mean, "(1 - a_{t-1}(1 - ...))", parses two ways.
enum class X0Parse { as_printed, factored };

struct PosteriorCoefficients {
  double c_xt = 0.0;
  double c_x0 = 0.0;
  double c_y = 0.0;
  double variance = 0.0;  // unclamped
  CoefficientSource source = CoefficientSource::oracle_derived;

  double sum() const { return c_xt + c_x0 + c_y; }
};

struct PosteriorParams {
  ImageGrid mean;         // field role
  double variance = 0.0;  // clamped at 0
};

struct ForwardOptions {
  // Scale the forward noise by sigma2 itself instead of sqrt(sigma2).
  bool paper_literal_noise = false;
};

inline double noise_scale(double variance, const ForwardOptions& opts) {
  return opts.paper_literal_noise ? variance : std::sqrt(std::max(0.0, variance));
}

/// x~0 for the stage: dropout (sketch), pixelation (palette) or x0 itself.
inline ImageGrid tilde_x0(StageKind stage, const ImageGrid& x0, int t, const DegradationPlan& plan, SeededRng& rng) {
  require(t >= 0 && t <= plan.steps(), ErrorKind::out_of_range, "tilde_x0: t out of range");
  switch (stage) {
    case StageKind::sketch:
      require(x0.channels() == 1, ErrorKind::shape_mismatch, "tilde_x0: sketch stage expects 1 channel");
      return sketch_dropout(x0, t, plan, rng);
    case StageKind::palette:
      require(x0.channels() == 3, ErrorKind::shape_mismatch, "tilde_x0: palette stage expects 3 channels");
      return pixelate(x0, plan.kernel[t], plan.kernel[t]);
    case StageKind::detailed:
      return x0;
  }
  return x0;
}

/// x_t = alpha_t x~0 + (1 - alpha_t) y + sqrt(sigma2_t) eps with explicit noise.
inline ImageGrid forward_with_noise(const ImageGrid& x0_tilde, const ImageGrid& y, int t, const NoiseSchedule& sched,
                                    const ImageGrid& eps, const ForwardOptions& opts = {}) {
  require_same_shape(x0_tilde, y, "forward_sample");
  require_same_shape(x0_tilde, eps, "forward_sample");
  require(is_bridge_family(sched.kind), ErrorKind::invalid_argument, "forward_sample: ddpm schedule; use ddpm_forward");
  require(t >= 0 && t <= sched.steps, ErrorKind::out_of_range, "forward_sample: t out of range");
  const double a = sched.alpha[t];
  const double scale = noise_scale(sched.sigma2[t], opts);
  std::vector<double> out(x0_tilde.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a * x0_tilde.values()[i] + (1.0 - a) * y.values()[i] + scale * eps.values()[i];
  return ImageGrid::field(x0_tilde.shape(), std::move(out));
}

/// Degrades x0 for the stage and samples the forward marginal. Sketch stages
/// use gray (channel-replicated) noise.
inline ImageGrid forward_sample(const ImageGrid& x0, const ImageGrid& y, int t, const NoiseSchedule& sched,
                                StageKind stage, const DegradationPlan& plan, SeededRng& rng,
                                const ForwardOptions& opts = {}) {
  require_same_shape(x0, y, "forward_sample");
  const ImageGrid xt0 = tilde_x0(stage, x0, t, plan, rng);
  const ImageGrid eps = gaussian_field(rng, x0.shape(), stage == StageKind::sketch);
  return forward_with_noise(xt0, y, t, sched, eps, opts);
}

namespace detail {

struct MarginalTerms {
  double signal, cond, var;
};

inline MarginalTerms marginal_terms(const NoiseSchedule& s, int t) {
  if (s.kind == ScheduleKind::ddpm_linear) return {std::sqrt(s.alphabar[t]), 0.0, 1.0 - s.alphabar[t]};
  return {s.alpha[t], 1.0 - s.alpha[t], s.sigma2[t]};
}

inline void check_posterior_steps(const NoiseSchedule& s, int t, int t_prev) {
  require(t >= 1 && t <= s.steps, ErrorKind::out_of_range, "posterior: t must be in [1, T]");
  require(t_prev >= 0 && t_prev < t, ErrorKind::out_of_range, "posterior: t_prev must be in [0, t)");
}

}  // namespace detail

/// Gaussian-conditioning posterior q(x_u | x_t, x0, y) for u = t_prev < t.
inline PosteriorCoefficients oracle_coefficients(const NoiseSchedule& s, int t, int t_prev) {
  detail::check_posterior_steps(s, t, t_prev);
  const auto cur = detail::marginal_terms(s, t);
  const auto prev = detail::marginal_terms(s, t_prev);
  require(prev.signal > 0.0, ErrorKind::numeric, "posterior: zero signal weight before t");
  const double a = cur.signal / prev.signal;
  const double k = cur.var > 0.0 ? a * prev.var / cur.var : 0.0;
  PosteriorCoefficients c;
  c.source = CoefficientSource::oracle_derived;
  c.c_xt = k;
  c.c_x0 = prev.signal - k * cur.signal;
  c.c_y = prev.cond - k * cur.cond;
  c.variance = cur.var > 0.0 ? prev.var - a * a * prev.var * prev.var / cur.var : prev.var;
  return c;
}

/// The printed closed-form mean and variance, evaluated with t-1 replaced by
/// t_prev. Ratios whose numerator variance is zero are taken as 0; a zero
/// variance at t likewise zeroes sigma2_{t-1}/sigma2_t.
inline PosteriorCoefficients paper_literal_coefficients(const NoiseSchedule& s, int t, int t_prev,
                                                        X0Parse parse = X0Parse::as_printed) {
  detail::check_posterior_steps(s, t, t_prev);
  require(is_bridge_family(s.kind), ErrorKind::invalid_argument, "paper-literal posterior needs a bridge-family schedule");
  const double at = s.alpha[t], au = s.alpha[t_prev];
  const double vt = s.sigma2[t], vu = s.sigma2[t_prev];
  const double r = (vu == 0.0 || vt == 0.0) ? 0.0 : vu / vt;
  const double g = (1.0 - au) == 0.0 ? 0.0 : (1.0 - at) / (1.0 - au);
  PosteriorCoefficients c;
  c.source = CoefficientSource::paper_literal;
  c.c_xt = r * g;
  c.c_x0 = parse == X0Parse::as_printed ? 1.0 - au * (1.0 - r * g * g) : (1.0 - au) * (1.0 - r * g * g);
  c.c_y = au - at * g * r;
  c.variance = vu * (1.0 - r * g * g);
  return c;
}

inline PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t, CoefficientSource source,
                                                    int t_prev = -1) {
  if (t_prev < 0) t_prev = t - 1;
  return source == CoefficientSource::oracle_derived ? oracle_coefficients(s, t, t_prev)
                                                     : paper_literal_coefficients(s, t, t_prev);
}

inline PosteriorParams posterior_params(const ImageGrid& x_t, const ImageGrid& x0_hat, const ImageGrid& y, int t,
                                        const NoiseSchedule& s, CoefficientSource source, int t_prev = -1) {
  require_same_shape(x_t, x0_hat, "posterior_params");
  require_same_shape(x_t, y, "posterior_params");
  const PosteriorCoefficients c = posterior_coefficients(s, t, source, t_prev);
  std::vector<double> mean(x_t.size());
  for (std::size_t i = 0; i < mean.size(); ++i)
    mean[i] = c.c_xt * x_t.values()[i] + c.c_x0 * x0_hat.values()[i] + c.c_y * y.values()[i];
  return {ImageGrid::field(x_t.shape(), std::move(mean)), std::max(0.0, c.variance)};
}

/// One reverse transition with caller-supplied noise (used by fixed-noise sessions).
inline ImageGrid reverse_step(const ImageGrid& x_t, const ImageGrid& x0_hat, const ImageGrid& y, int t,
                              const NoiseSchedule& s, const ImageGrid& eps, CoefficientSource source,
                              int t_prev = -1) {
  PosteriorParams p = posterior_params(x_t, x0_hat, y, t, s, source, t_prev);
  if (p.variance == 0.0) return std::move(p.mean);
  require_same_shape(x_t, eps, "reverse_step");
  const double sd = std::sqrt(p.variance);
  std::vector<double> out = p.mean.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sd * eps.values()[i];
  return ImageGrid::field(x_t.shape(), std::move(out));
}

inline ImageGrid reverse_step(const ImageGrid& x_t, const ImageGrid& x0_hat, const ImageGrid& y, int t,
                              const NoiseSchedule& s, SeededRng& rng, CoefficientSource source, int t_prev = -1,
                              bool gray = false) {
  const ImageGrid eps = gaussian_field(rng, x_t.shape(), gray);
  return reverse_step(x_t, x0_hat, y, t, s, eps, source, t_prev);
}

// ---------------------------------------------------------------------------
// DDPM baseline
// ---------------------------------------------------------------------------

inline ImageGrid ddpm_forward(const ImageGrid& x0, int t, const NoiseSchedule& s, SeededRng& rng) {
  require(s.kind == ScheduleKind::ddpm_linear, ErrorKind::invalid_argument, "ddpm_forward: needs a ddpm-linear schedule");
  require(t >= 0 && t <= s.steps, ErrorKind::out_of_range, "ddpm_forward: t out of range");
  const double a = std::sqrt(s.alphabar[t]);
  const double b = std::sqrt(1.0 - s.alphabar[t]);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0.values()[i] + b * rng.normal();
  return ImageGrid::field(x0.shape(), std::move(out));
}

inline PosteriorParams ddpm_posterior(const ImageGrid& x_t, const ImageGrid& x0_hat, int t, const NoiseSchedule& s,
                                      int t_prev = -1) {
  require(s.kind == ScheduleKind::ddpm_linear, ErrorKind::invalid_argument, "ddpm_posterior: needs a ddpm-linear schedule");
  require_same_shape(x_t, x0_hat, "ddpm_posterior");
  const PosteriorCoefficients c = oracle_coefficients(s, t, t_prev < 0 ? t - 1 : t_prev);
  std::vector<double> mean(x_t.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = c.c_xt * x_t.values()[i] + c.c_x0 * x0_hat.values()[i];
  return {ImageGrid::field(x_t.shape(), std::move(mean)), std::max(0.0, c.variance)};
}

// ---------------------------------------------------------------------------
// ELBO diagnostics
// ---------------------------------------------------------------------------

using X0Predictor = std::function<ImageGrid(const ImageGrid& x_t, const ImageGrid& y, int t)>;

struct ElboTerms {
  std::optional<double> prior_kl;
  std::vector<std::optional<double>> kl;  // index t; entries 2..T are meaningful, nullopt = zero-variance, flagged
  double reconstruction_sq_error = 0.0;   // ||x0 - mu_theta(x1)||^2; the t=1 posterior is degenerate
  std::vector<int> flagged;
};

/// Single-sample estimate of the conditioned ELBO terms using oracle posteriors.
inline ElboTerms elbo_terms(const ImageGrid& x0, const ImageGrid& y, const NoiseSchedule& s,
                            const X0Predictor& predictor, SeededRng& rng) {
  require(is_bridge_family(s.kind), ErrorKind::invalid_argument, "elbo_terms: bridge-family schedule required");
  require_same_shape(x0, y, "elbo_terms");
  ElboTerms out;
  out.kl.resize(static_cast<std::size_t>(s.steps) + 1);

  auto sq_dist = [](const ImageGrid& a, const ImageGrid& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
    return acc;
  };

  const double vT = s.sigma2[s.steps];
  double prior_sq = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double d = s.alpha[s.steps] * (x0.values()[i] - y.values()[i]);
    prior_sq += d * d;
  }
  if (vT > 0.0)
    out.prior_kl = prior_sq / (2.0 * vT);
  else if (prior_sq == 0.0)
    out.prior_kl = 0.0;
  else
    out.flagged.push_back(s.steps + 1);

  const auto sample_xt = [&](int t) {
    const ImageGrid eps = gaussian_field(rng, x0.shape(), false);
    return forward_with_noise(x0, y, t, s, eps);
  };

  for (int t = 2; t <= s.steps; ++t) {
    const ImageGrid xt = sample_xt(t);
    const ImageGrid x0_hat = predictor(xt, y, t);
    const PosteriorParams q = posterior_params(xt, x0, y, t, s, CoefficientSource::oracle_derived);
    const PosteriorParams p = posterior_params(xt, x0_hat, y, t, s, CoefficientSource::oracle_derived);
    const double d2 = sq_dist(q.mean, p.mean);
    if (q.variance > 0.0)
      out.kl[t] = d2 / (2.0 * q.variance);
    else
      out.flagged.push_back(t);
  }
  const ImageGrid x1 = sample_xt(1);
  const PosteriorParams p1 =
      posterior_params(x1, predictor(x1, y, 1), y, 1, s, CoefficientSource::oracle_derived);
  out.reconstruction_sq_error = sq_dist(x0, p1.mean);
  return out;
}

}  // namespace toddler
