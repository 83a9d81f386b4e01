#pragma once

// Procedural flat-colour shape scenes with their edge-map sketch and 8x8
// palette, plus the on-disk dataset layout.
//
// Fill colour depends on the shape type (circle red, rectangle green, triangle
// blue, each with jitter) so the sketch carries colour information. Shapes do
// not touch, which keeps every boundary a fill/background boundary.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "degrade.hpp"
#include "image_io.hpp"

namespace toddler {

enum class ShapeKind { circle, rectangle, triangle };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

struct Rgb {
  double r = 0, g = 0, b = 0;
  double luminance() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
  double max_channel_distance(const Rgb& o) const {
    return std::max({std::abs(r - o.r), std::abs(g - o.g), std::abs(b - o.b)});
  }
};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  double cx = 0, cy = 0;
  double size = 0;    // radius, or half width for rectangles
  double size2 = 0;   // half height for rectangles
  double angle = 0;   // triangle rotation
  Rgb color;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (kind) {
      case ShapeKind::circle: return dx * dx + dy * dy <= size * size;
      case ShapeKind::rectangle: return std::abs(dx) <= size && std::abs(dy) <= size2;
      case ShapeKind::triangle: {
        double px[3], py[3];
        for (int k = 0; k < 3; ++k) {
          const double a = angle + k * 2.0 * std::numbers::pi / 3.0;
          px[k] = cx + size * std::cos(a);
          py[k] = cy + size * std::sin(a);
        }
        auto side = [&](int i, int j) { return (px[j] - px[i]) * (y - py[i]) - (py[j] - py[i]) * (x - px[i]); };
        const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
        return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
      }
    }
    return false;
  }
};

struct SceneRecipe {
  int canvas = 32;
  Rgb background;
  std::vector<ShapeSpec> shapes;
  std::uint64_t seed = 0;
};

struct Scene {
  SceneRecipe recipe;
  ImageGrid rgb;
  ImageGrid sketch;
  ImageGrid palette;
};

struct ToyworldOptions {
  int canvas = 32;
  int palette_kernel = 8;
  double edge_threshold = 0.1;
};

namespace detail {

// Quantised to the 8-bit grid so PNG storage of the RGB image is lossless.
inline double q8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline Rgb jittered(SeededRng& rng, double r0, double r1, double g0, double g1, double b0, double b1) {
  return {q8(rng.uniform(r0, r1)), q8(rng.uniform(g0, g1)), q8(rng.uniform(b0, b1))};
}

inline Rgb shape_color(ShapeKind k, SeededRng& rng) {
  switch (k) {
    case ShapeKind::circle: return jittered(rng, 0.75, 0.95, 0.05, 0.25, 0.05, 0.25);
    case ShapeKind::rectangle: return jittered(rng, 0.05, 0.25, 0.6, 0.85, 0.05, 0.25);
    case ShapeKind::triangle: return jittered(rng, 0.05, 0.25, 0.1, 0.35, 0.7, 0.95);
  }
  return {};
}

inline std::vector<std::uint8_t> shape_mask(const ShapeSpec& s, int n) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * n, 0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) m[static_cast<std::size_t>(y) * n + x] = s.contains(x + 0.5, y + 0.5);
  return m;
}

}  // namespace detail

/// Samples a recipe: 1-3 non-touching shapes (2 px gap, 2 px from the border).
inline SceneRecipe make_recipe(std::uint64_t seed, int canvas = 32) {
  require(canvas >= 16 && canvas <= 64, ErrorKind::invalid_argument, "toyworld: canvas must be in [16, 64]");
  SeededRng rng(seed, 0x70F);
  SceneRecipe r;
  r.canvas = canvas;
  r.seed = seed;
  r.background = detail::jittered(rng, 0.85, 1.0, 0.85, 1.0, 0.85, 1.0);
  const double scale = canvas / 32.0;
  const int wanted = rng.uniform_int(1, 3);
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(canvas) * canvas, 0);  // occupied, dilated by the gap
  const int gap = 2;
  for (int attempt = 0; attempt < 60 && static_cast<int>(r.shapes.size()) < wanted; ++attempt) {
    ShapeSpec s;
    s.kind = static_cast<ShapeKind>(rng.below(3));
    s.size = rng.uniform(3.5, 8.0) * scale;
    s.size2 = s.kind == ShapeKind::rectangle ? rng.uniform(3.0, 7.0) * scale : s.size;
    s.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ext_x = s.size;
    const double ext_y = s.kind == ShapeKind::rectangle ? s.size2 : s.size;
    const double lo_x = ext_x + gap, hi_x = canvas - ext_x - gap;
    const double lo_y = ext_y + gap, hi_y = canvas - ext_y - gap;
    if (lo_x >= hi_x || lo_y >= hi_y) continue;
    s.cx = rng.uniform(lo_x, hi_x);
    s.cy = rng.uniform(lo_y, hi_y);
    s.color = detail::shape_color(s.kind, rng);
    const auto m = detail::shape_mask(s, canvas);
    bool ok = false, clash = false;
    for (std::size_t i = 0; i < m.size(); ++i) {
      ok |= m[i] != 0;
      clash |= m[i] && taken[i];
    }
    if (!ok || clash) continue;
    for (int y = 0; y < canvas; ++y)
      for (int x = 0; x < canvas; ++x) {
        if (!m[static_cast<std::size_t>(y) * canvas + x]) continue;
        for (int dy = -gap; dy <= gap; ++dy)
          for (int dx = -gap; dx <= gap; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < canvas && xx >= 0 && xx < canvas) taken[static_cast<std::size_t>(yy) * canvas + xx] = 1;
          }
      }
    r.shapes.push_back(s);
  }
  if (r.shapes.empty()) {
    // Fallback that always fits.
    ShapeSpec s;
    s.kind = ShapeKind::circle;
    s.cx = s.cy = canvas / 2.0;
    s.size = s.size2 = 5.0 * scale;
    s.color = detail::shape_color(s.kind, rng);
    r.shapes.push_back(s);
  }
  return r;
}

/// Hard-edged rendering: each pixel takes the colour of the shape covering its centre.
inline ImageGrid render(const SceneRecipe& r) {
  const int n = r.canvas;
  std::vector<double> v(static_cast<std::size_t>(n) * n * 3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      Rgb c = r.background;
      for (const auto& s : r.shapes)
        if (s.contains(x + 0.5, y + 0.5)) c = s.color;
      double* p = v.data() + (static_cast<std::size_t>(y) * n + x) * 3;
      p[0] = c.r;
      p[1] = c.g;
      p[2] = c.b;
    }
  return ImageGrid({n, n, 3}, std::move(v));
}

inline Scene gen_scene(std::uint64_t seed, const ToyworldOptions& opts = {}) {
  Scene s;
  s.recipe = make_recipe(seed, opts.canvas);
  s.rgb = render(s.recipe);
  s.sketch = edge_map(s.rgb, opts.edge_threshold);
  s.palette = pixelate(s.rgb, opts.palette_kernel, opts.palette_kernel);
  return s;
}

inline double white_fraction(const ImageGrid& sketch) {
  double n = 0;
  for (double v : sketch.values()) n += v;
  return n / static_cast<double>(sketch.size());
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

enum class Split { train, val };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

/// Deterministic 90/10 split by index.
inline Split split_of(std::size_t index) { return index % 10 == 9 ? Split::val : Split::train; }

inline std::uint64_t item_seed(std::uint64_t dataset_seed, std::size_t index) {
  return detail::mix64(dataset_seed * detail::golden + index + 1);
}

struct DatasetItem {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  Split split = Split::train;
  ImageGrid rgb, sketch, palette;
};

struct Dataset {
  std::vector<DatasetItem> items;
  nlohmann::json manifest;

  std::vector<const DatasetItem*> subset(Split s) const {
    std::vector<const DatasetItem*> out;
    for (const auto& it : items)
      if (it.split == s) out.push_back(&it);
    return out;
  }
};

inline std::string item_name(std::size_t index, std::size_t n) {
  std::string digits = std::to_string(index);
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n > 0 ? n - 1 : 0).size());
  return std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

/// Writes rgb/, sketch/, palette/ PNGs and manifest.json. Returns the manifest.
inline nlohmann::json gen_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                  const ToyworldOptions& opts = {}) {
  require(n >= 1, ErrorKind::invalid_argument, "gen_dataset: n must be >= 1");
  std::error_code ec;
  for (const char* sub : {"rgb", "sketch", "palette"}) std::filesystem::create_directories(out_dir / sub, ec);
  require(!ec, ErrorKind::io, "gen_dataset: cannot create " + out_dir.string());
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = item_seed(seed, i);
    const Scene sc = gen_scene(s, opts);
    const std::string name = item_name(i, n) + ".png";
    write_png(out_dir / "rgb" / name, sc.rgb);
    write_png(out_dir / "sketch" / name, sc.sketch);
    write_png(out_dir / "palette" / name, sc.palette);
    items.push_back({{"index", i},
                     {"seed", s},
                     {"split", to_string(split_of(i))},
                     {"rgb", "rgb/" + name},
                     {"sketch", "sketch/" + name},
                     {"palette", "palette/" + name}});
  }
  nlohmann::json manifest = {{"format", "toddler-toyworld"},
                             {"version", 1},
                             {"n", n},
                             {"seed", seed},
                             {"canvas", opts.canvas},
                             {"palette_kernel", opts.palette_kernel},
                             {"edge_threshold", opts.edge_threshold},
                             {"items", std::move(items)}};
  std::ofstream f(out_dir / "manifest.json");
  require(static_cast<bool>(f), ErrorKind::io, "gen_dataset: cannot write manifest");
  f << manifest.dump(2) << '\n';
  require(static_cast<bool>(f), ErrorKind::io, "gen_dataset: cannot write manifest");
  return manifest;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  require(static_cast<bool>(f), ErrorKind::io, "dataset: no manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, std::string("dataset: bad manifest: ") + e.what());
  }
}

/// Loads every item from PNG. `limit` (if nonzero) keeps the first `limit` items.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t limit = 0) {
  Dataset d;
  d.manifest = read_manifest(dir);
  for (const auto& it : d.manifest.at("items")) {
    if (limit && d.items.size() >= limit) break;
    DatasetItem item;
    item.index = it.at("index").get<std::size_t>();
    item.seed = it.at("seed").get<std::uint64_t>();
    item.split = it.at("split").get<std::string>() == "val" ? Split::val : Split::train;
    item.rgb = read_png(dir / it.at("rgb").get<std::string>());
    item.sketch = read_png(dir / it.at("sketch").get<std::string>());
    item.palette = read_png(dir / it.at("palette").get<std::string>());
    d.items.push_back(std::move(item));
  }
  require(!d.items.empty(), ErrorKind::invalid_argument, "dataset: no items in " + dir.string());
  return d;
}

/// In-memory dataset straight from the generator, same seeds and split as gen_dataset.
inline Dataset make_dataset(std::size_t n, std::uint64_t seed, const ToyworldOptions& opts = {}) {
  require(n >= 1, ErrorKind::invalid_argument, "make_dataset: n must be >= 1");
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    DatasetItem item;
    item.index = i;
    item.seed = item_seed(seed, i);
    item.split = split_of(i);
    const Scene sc = gen_scene(item.seed, opts);
    item.rgb = sc.rgb;
    item.sketch = sc.sketch;
    item.palette = sc.palette;
    d.items.push_back(std::move(item));
  }
  d.manifest = {{"format", "toddler-toyworld"}, {"n", n}, {"seed", seed}, {"canvas", opts.canvas}};
  return d;
}

}  // namespace toddler
