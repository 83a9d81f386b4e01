#pragma once

// Desk-scale quality metrics: toy Frechet distance on 8x8x3 downsampled pixels,
// MSE/PSNR and slack-tolerant contour F1.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"

namespace toddler {

inline constexpr int kFeatureSide = 8;
inline constexpr int kFeatureDim = kFeatureSide * kFeatureSide * 3;
inline constexpr std::size_t kMinFrechetSet = 32;
inline constexpr double kCovarianceJitter = 1e-6;
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// Area-average downsample to 8x8, one-channel images replicated to RGB.
inline Eigen::VectorXd features(const ImageGrid& img) {
  const int H = img.height(), W = img.width(), C = img.channels();
  require(C == 1 || C == 3, ErrorKind::shape_mismatch, "features: 1 or 3 channels expected");
  require(H >= kFeatureSide && W >= kFeatureSide, ErrorKind::shape_mismatch, "features: image smaller than 8x8");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(kFeatureDim);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(kFeatureSide * kFeatureSide);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int cell = (y * kFeatureSide / H) * kFeatureSide + (x * kFeatureSide / W);
      count(cell) += 1;
      for (int c = 0; c < 3; ++c) f(cell * 3 + c) += img.at(y, x, C == 1 ? 0 : c);
    }
  for (int cell = 0; cell < kFeatureSide * kFeatureSide; ++cell) f.segment(cell * 3, 3) /= count(cell);
  return f;
}

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
};

inline FeatureStats feature_stats(std::span<const ImageGrid> images) {
  require(images.size() >= kMinFrechetSet, ErrorKind::invalid_argument,
          "toy_frechet: each set needs at least 32 images, got " + std::to_string(images.size()));
  const auto n = static_cast<Eigen::Index>(images.size());
  Eigen::MatrixXd X(n, kFeatureDim);
  for (Eigen::Index i = 0; i < n; ++i) X.row(i) = features(images[static_cast<std::size_t>(i)]).transpose();
  FeatureStats s;
  s.count = images.size();
  s.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd centred = X.rowwise() - s.mean.transpose();
  s.cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues from
/// roundoff are clipped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  require(es.info() == Eigen::Success, ErrorKind::numeric, "psd_sqrt: eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), using Tr((S1 S2)^{1/2}) =
/// Tr((A S2 A)^{1/2}) with A = S1^{1/2}, so only symmetric problems are solved.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  const Eigen::Index d = a.mean.size();
  const Eigen::MatrixXd jitter = kCovarianceJitter * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd s1 = a.cov + jitter, s2 = b.cov + jitter;
  const Eigen::MatrixXd r1 = psd_sqrt(s1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r1 * s2 * r1, Eigen::EigenvaluesOnly);
  require(es.info() == Eigen::Success, ErrorKind::numeric, "frechet: eigendecomposition failed");
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  return std::max(0.0, dist);
}

inline double toy_frechet(std::span<const ImageGrid> a, std::span<const ImageGrid> b) {
  return frechet_distance(feature_stats(a), feature_stats(b));
}

inline double mse(const ImageGrid& a, const ImageGrid& b) {
  require_same_shape(a, b, "mse");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// Peak 1.0; identical images give kInfinitePsnr.
inline double psnr(const ImageGrid& a, const ImageGrid& b) {
  const double m = mse(a, b);
  return m == 0.0 ? kInfinitePsnr : -10.0 * std::log10(m);
}

struct ContourScore {
  double precision = 0, recall = 0, f1 = 0;
};

namespace detail {
// Fraction of white pixels of `from` with a white pixel of `to` within Chebyshev distance `slack`.
inline double matched_fraction(const ImageGrid& from, const ImageGrid& to, int slack, bool& any) {
  const int H = from.height(), W = from.width();
  std::size_t total = 0, hit = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (from.at(y, x) != 1.0) continue;
      ++total;
      bool found = false;
      for (int dy = -slack; dy <= slack && !found; ++dy)
        for (int dx = -slack; dx <= slack && !found; ++dx) {
          const int yy = y + dy, xx = x + dx;
          found = yy >= 0 && yy < H && xx >= 0 && xx < W && to.at(yy, xx) == 1.0;
        }
      hit += found;
    }
  any = total > 0;
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}
}  // namespace detail

/// Two empty sketches agree perfectly (F1 = 1); one empty side scores 0.
inline ContourScore contour_score(const ImageGrid& pred, const ImageGrid& gt, int slack = 1) {
  require(pred.channels() == 1 && gt.channels() == 1, ErrorKind::shape_mismatch, "contour_f1: 1-channel sketches");
  require_same_shape(pred, gt, "contour_f1");
  require(is_binary(pred) && is_binary(gt), ErrorKind::invalid_argument, "contour_f1: sketches must be binary");
  require(slack >= 0, ErrorKind::invalid_argument, "contour_f1: slack must be >= 0");
  bool pred_any = false, gt_any = false;
  ContourScore s;
  s.precision = detail::matched_fraction(pred, gt, slack, pred_any);
  s.recall = detail::matched_fraction(gt, pred, slack, gt_any);
  if (!pred_any && !gt_any) return {1.0, 1.0, 1.0};
  if (!pred_any || !gt_any) return {pred_any ? 0.0 : 1.0, gt_any ? 0.0 : 1.0, 0.0};
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline double contour_f1(const ImageGrid& pred, const ImageGrid& gt, int slack = 1) {
  return contour_score(pred, gt, slack).f1;
}

/// Best F1 of `pred` against any reference sketch.
inline double nearest_contour_f1(const ImageGrid& pred, std::span<const ImageGrid> refs, int slack = 1) {
  require(!refs.empty(), ErrorKind::invalid_argument, "nearest_contour_f1: no references");
  double best = 0;
  for (const auto& r : refs) best = std::max(best, contour_f1(pred, r, slack));
  return best;
}

}  // namespace toddler
