#pragma once

// Stage degradations (sketch dropout, pixelation), edge-map guidance and the
// sketch-over-palette overlay.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"

namespace toddler {

enum class StageKind { sketch, palette, detailed };

inline std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::sketch: return "sketch";
    case StageKind::palette: return "palette";
    case StageKind::detailed: return "detailed";
  }
  return "?";
}

inline StageKind parse_stage_kind(std::string_view s) {
  if (s == "sketch") return StageKind::sketch;
  if (s == "palette") return StageKind::palette;
  if (s == "detailed") return StageKind::detailed;
  throw Error(ErrorKind::config, "unknown stage kind '" + std::string(s) + "'");
}

/// Per-timestep degradation strengths for one stage.
struct DegradationPlan {
  StageKind stage = StageKind::detailed;
  std::vector<double> keep_rate;  // kappa_t, T+1 entries, kappa_0 = 1, non-increasing
  std::vector<int> kernel;        // K_t, T+1 entries, K_0 = 1, non-decreasing; stride == kernel
  double edge_threshold = 0.1;

  int steps() const { return static_cast<int>(keep_rate.size()) - 1; }

  /// kappa_t = 1 - (1 - keep_min) t/T; K_t doubles in even steps of t from 1 up to max_kernel.
  static DegradationPlan make(StageKind stage, int steps, double keep_min = 0.3, int max_kernel = 32,
                              double edge_threshold = 0.1) {
    require(steps >= 1, ErrorKind::invalid_argument, "DegradationPlan: T must be >= 1");
    require(keep_min > 0.0 && keep_min <= 1.0, ErrorKind::invalid_argument, "DegradationPlan: keep_min in (0,1]");
    require(max_kernel >= 1, ErrorKind::invalid_argument, "DegradationPlan: max_kernel >= 1");
    require(edge_threshold > 0.0 && edge_threshold < 1.0, ErrorKind::invalid_argument,
            "DegradationPlan: edge threshold in (0,1)");
    DegradationPlan p;
    p.stage = stage;
    p.edge_threshold = edge_threshold;
    p.keep_rate.resize(steps + 1);
    p.kernel.resize(steps + 1);
    int levels = 0;
    while ((2 << levels) <= max_kernel) ++levels;
    for (int t = 0; t <= steps; ++t) {
      p.keep_rate[t] = 1.0 - (1.0 - keep_min) * t / static_cast<double>(steps);
      const int level = std::min(levels, t * (levels + 1) / (steps + 1));
      p.kernel[t] = 1 << level;
    }
    return p;
  }
};

inline std::vector<std::string> validate(const DegradationPlan& p) {
  std::vector<std::string> issues;
  if (p.keep_rate.empty() || p.keep_rate.size() != p.kernel.size()) {
    issues.push_back("keep_rate/kernel must have T+1 entries");
    return issues;
  }
  if (p.keep_rate[0] != 1.0) issues.push_back("kappa_0 must be 1");
  if (p.kernel[0] != 1) issues.push_back("K_0 must be 1");
  for (std::size_t t = 0; t < p.keep_rate.size(); ++t) {
    if (!(p.keep_rate[t] > 0.0 && p.keep_rate[t] <= 1.0)) issues.push_back("kappa outside (0,1]");
    if (t > 0 && p.keep_rate[t] > p.keep_rate[t - 1]) issues.push_back("kappa increasing at t=" + std::to_string(t));
    if (t > 0 && p.kernel[t] < p.kernel[t - 1]) issues.push_back("K decreasing at t=" + std::to_string(t));
  }
  return issues;
}

/// F_d: keeps each white pixel independently with probability kappa_t.
inline ImageGrid sketch_dropout(const ImageGrid& sketch, int t, const DegradationPlan& plan, SeededRng& rng) {
  require(sketch.channels() == 1, ErrorKind::shape_mismatch, "sketch_dropout: sketch must be 1-channel");
  require(is_binary(sketch), ErrorKind::invalid_argument, "sketch_dropout: sketch must be binary");
  require(t >= 0 && t <= plan.steps(), ErrorKind::out_of_range, "sketch_dropout: t out of range");
  const double keep = plan.keep_rate[t];
  if (keep >= 1.0) return sketch;
  std::vector<double> out = sketch.values();
  for (double& v : out)
    if (v == 1.0 && !rng.bernoulli(keep)) v = 0.0;
  return ImageGrid(sketch.shape(), std::move(out));
}

/// F_p: replaces each kernel x kernel block by its channel-wise mean. Blocks that
/// overrun the border are padded by edge replication; kernel is capped at min(H,W).
inline ImageGrid pixelate(const ImageGrid& img, int kernel, int stride) {
  require(kernel >= 1, ErrorKind::invalid_argument, "pixelate: kernel must be >= 1");
  require(stride == kernel, ErrorKind::invalid_argument, "pixelate: stride must equal kernel");
  kernel = std::min({kernel, img.height(), img.width()});
  if (kernel == 1) return img;
  const int H = img.height(), W = img.width(), C = img.channels();
  std::vector<double> out(img.size());
  std::vector<double> mean(static_cast<std::size_t>(C));
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  for (int by = 0; by < H; by += kernel) {
    for (int bx = 0; bx < W; bx += kernel) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (int dy = 0; dy < kernel; ++dy) {
        const int y = std::min(by + dy, H - 1);
        for (int dx = 0; dx < kernel; ++dx) {
          const int x = std::min(bx + dx, W - 1);
          for (int c = 0; c < C; ++c) mean[c] += img.at(y, x, c);
        }
      }
      for (double& m : mean) m *= inv;
      for (int y = by; y < std::min(by + kernel, H); ++y)
        for (int x = bx; x < std::min(bx + kernel, W); ++x)
          for (int c = 0; c < C; ++c) out[img.index(y, x, c)] = mean[c];
    }
  }
  return ImageGrid(img.shape(), std::move(out), img.role());
}

inline ImageGrid luminance(const ImageGrid& rgb) {
  require(rgb.channels() == 3, ErrorKind::shape_mismatch, "luminance: expects 3 channels");
  Shape s{rgb.height(), rgb.width(), 1};
  std::vector<double> out(s.size());
  for (std::size_t p = 0; p < s.pixels(); ++p) {
    const double* v = rgb.values().data() + 3 * p;
    out[p] = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
  }
  return ImageGrid(s, std::move(out));
}

/// Absolute 4-neighbour Laplacian of luminance (replicated border), thresholded
/// strictly above tau.
inline ImageGrid edge_map(const ImageGrid& rgb, double tau) {
  const ImageGrid lum = luminance(rgb);
  const int H = lum.height(), W = lum.width();
  std::vector<double> out(lum.size());
  auto L = [&](int y, int x) { return lum.at(std::clamp(y, 0, H - 1), std::clamp(x, 0, W - 1)); };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double lap = L(y - 1, x) + L(y + 1, x) + L(y, x - 1) + L(y, x + 1) - 4.0 * L(y, x);
      out[static_cast<std::size_t>(y) * W + x] = std::abs(lap) > tau ? 1.0 : 0.0;
    }
  return ImageGrid(lum.shape(), std::move(out));
}

/// Draws the sketch in `line_color` over the palette. Non-binary sketch values
/// act as blend weights.
inline ImageGrid overlay(const ImageGrid& sketch, const ImageGrid& palette, double line_color = 0.1) {
  require(sketch.channels() == 1, ErrorKind::shape_mismatch, "overlay: sketch must be 1-channel");
  require(palette.channels() == 3, ErrorKind::shape_mismatch, "overlay: palette must be 3-channel");
  require(sketch.height() == palette.height() && sketch.width() == palette.width(), ErrorKind::shape_mismatch,
          "overlay: sketch and palette sizes differ");
  std::vector<double> out(palette.size());
  for (std::size_t p = 0; p < sketch.size(); ++p) {
    const double m = std::clamp(sketch.values()[p], 0.0, 1.0);
    for (int c = 0; c < 3; ++c) out[3 * p + c] = (1.0 - m) * palette.values()[3 * p + c] + m * line_color;
  }
  return ImageGrid(palette.shape(), std::move(out));
}

}  // namespace toddler
