#pragma once

// Shared value types: image grids, errors and counter-based randomness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace toddler {

enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  out_of_range,
  bad_magic,
  truncated,
  unsupported_version,
  io,
  numeric,
  config,
  order,  // operation issued before its prerequisites
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  std::size_t pixels() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

// An image-role grid holds pixel values clamped to [0,1]. A field-role grid
// (noise, forward-process states) is only required to be finite.
enum class GridRole { image, field };

/// H x W x C row-major grid with interleaved channels: index (y*W + x)*C + c.
class ImageGrid {
 public:
  ImageGrid() = default;

  ImageGrid(Shape shape, GridRole role = GridRole::image)
      : shape_(shape), role_(role), data_(shape.size(), 0.0) {
    check_shape();
  }

  ImageGrid(Shape shape, std::vector<double> data, GridRole role = GridRole::image)
      : shape_(shape), role_(role), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_.size(), ErrorKind::shape_mismatch,
            "ImageGrid: data length " + std::to_string(data_.size()) + " does not match shape " +
                to_string(shape_));
    for (double& v : data_) {
      require(std::isfinite(v), ErrorKind::numeric, "ImageGrid: non-finite value");
      if (role_ == GridRole::image) v = std::clamp(v, 0.0, 1.0);
    }
  }

  static ImageGrid field(Shape shape, std::vector<double> data) {
    return ImageGrid(shape, std::move(data), GridRole::field);
  }
  static ImageGrid filled(Shape shape, double value, GridRole role = GridRole::image) {
    return ImageGrid(shape, std::vector<double>(shape.size(), value), role);
  }

  const Shape& shape() const noexcept { return shape_; }
  int height() const noexcept { return shape_.height; }
  int width() const noexcept { return shape_.width; }
  int channels() const noexcept { return shape_.channels; }
  std::size_t size() const noexcept { return data_.size(); }
  GridRole role() const noexcept { return role_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(shape_.width) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(shape_.channels) +
           static_cast<std::size_t>(c);
  }
  double at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  /// Same values, new role. Converting to image role clamps.
  ImageGrid as(GridRole role) const { return ImageGrid(shape_, data_, role); }

  bool operator==(const ImageGrid& o) const {
    return shape_ == o.shape_ && role_ == o.role_ && data_ == o.data_;
  }

 private:
  void check_shape() const {
    require(shape_.height > 0 && shape_.width > 0 && shape_.channels > 0, ErrorKind::invalid_argument,
            "ImageGrid: zero-sized shape " + to_string(shape_));
  }

  Shape shape_{};
  GridRole role_ = GridRole::image;
  std::vector<double> data_;
};

inline void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* where) {
  require(a.shape() == b.shape(), ErrorKind::shape_mismatch,
          std::string(where) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

inline bool is_binary(const ImageGrid& g) {
  return std::all_of(g.values().begin(), g.values().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

/// Copies a 1-channel grid into `channels` identical channels.
inline ImageGrid replicate_channels(const ImageGrid& g, int channels) {
  if (g.channels() == channels) return g;
  require(g.channels() == 1, ErrorKind::shape_mismatch, "replicate_channels: source must be 1-channel");
  Shape s{g.height(), g.width(), channels};
  std::vector<double> out(s.size());
  for (std::size_t p = 0; p < s.pixels(); ++p)
    for (int c = 0; c < channels; ++c) out[p * channels + c] = g.values()[p];
  return ImageGrid(s, std::move(out), g.role());
}

inline ImageGrid binarize(const ImageGrid& g, double threshold = 0.5) {
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.values()[i] > threshold ? 1.0 : 0.0;
  return ImageGrid(g.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Counter-based randomness
// ---------------------------------------------------------------------------

namespace detail {
constexpr std::uint64_t golden = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Draw i of a (seed, stream) pair is a pure function of (seed, stream, i), so
/// splitting into streams is order independent.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(detail::mix64(seed ^ detail::mix64(stream + 0x632BE59BD9B4E019ull))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() { return detail::mix64(key_ + detail::golden * ++counter_); }

  /// Uniform on the open interval (0,1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do r = next_u64();
    while (r >= limit);
    return r % n;
  }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one normal per two uniforms so draw k never depends on caching.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  SeededRng split(std::uint64_t sub) const {
    return SeededRng(seed_, detail::mix64(stream_ * detail::golden + sub + 1));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// i.i.d. standard normal field. With `gray`, one value per pixel is shared by
/// every channel.
inline ImageGrid gaussian_field(SeededRng& rng, Shape shape, bool gray) {
  require(shape.height > 0 && shape.width > 0 && shape.channels > 0, ErrorKind::invalid_argument,
          "gaussian_field: zero-sized shape");
  std::vector<double> out(shape.size());
  if (gray) {
    for (std::size_t p = 0; p < shape.pixels(); ++p) {
      const double v = rng.normal();
      for (int c = 0; c < shape.channels; ++c) out[p * shape.channels + c] = v;
    }
  } else {
    for (double& v : out) v = rng.normal();
  }
  return ImageGrid::field(shape, std::move(out));
}

}  // namespace toddler
