#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "toddler/toyworld.hpp"

using namespace toddler;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "toddler_test_toyworld" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Toyworld, SameSeedSameTriplet) {
  const Scene a = gen_scene(123), b = gen_scene(123);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.sketch, b.sketch);
  EXPECT_EQ(a.palette, b.palette);
  EXPECT_NE(gen_scene(124).rgb, a.rgb);
}

TEST(Toyworld, PaletteIsPixelatedRgb) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Scene sc = gen_scene(s);
    EXPECT_EQ(sc.palette, pixelate(sc.rgb, 8, 8));
    EXPECT_EQ(sc.sketch, edge_map(sc.rgb, 0.1));
  }
}

TEST(Toyworld, RecipeInvariants) {
  for (std::uint64_t s = 0; s < 500; ++s) {
    const SceneRecipe r = make_recipe(s);
    ASSERT_GE(r.shapes.size(), 1u);
    ASSERT_LE(r.shapes.size(), 3u);
    for (const auto& sh : r.shapes) {
      EXPECT_GE(sh.color.max_channel_distance(r.background), 0.2);
      const double ex = sh.size, ey = sh.kind == ShapeKind::rectangle ? sh.size2 : sh.size;
      EXPECT_GE(sh.cx - ex, 0.0);
      EXPECT_LE(sh.cx + ex, 32.0);
      EXPECT_GE(sh.cy - ey, 0.0);
      EXPECT_LE(sh.cy + ey, 32.0);
    }
  }
}

TEST(Toyworld, SketchSupportIsTheBoundaryBand) {
  // With hard edges the sketch is white exactly where a 4-neighbour has a different colour.
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Scene sc = gen_scene(s);
    const int n = 32;
    auto differs = [&](int y, int x, int yy, int xx) {
      yy = std::clamp(yy, 0, n - 1);
      xx = std::clamp(xx, 0, n - 1);
      for (int c = 0; c < 3; ++c)
        if (sc.rgb.at(y, x, c) != sc.rgb.at(yy, xx, c)) return true;
      return false;
    };
    int white = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const bool boundary = differs(y, x, y - 1, x) || differs(y, x, y + 1, x) || differs(y, x, y, x - 1) ||
                              differs(y, x, y, x + 1);
        EXPECT_EQ(sc.sketch.at(y, x) == 1.0, boundary) << "seed " << s << " at " << y << "," << x;
        white += sc.sketch.at(y, x) == 1.0;
      }
    EXPECT_GT(white, 0);
  }
}

TEST(Toyworld, CorpusWhiteFractionBelowTwentyPercent) {
  double total = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) total += white_fraction(gen_scene(item_seed(1, i)).sketch);
  EXPECT_LT(total / n, 0.20);
}

TEST(Toyworld, DatasetOnDisk) {
  const auto dir = fresh_dir("n100");
  const auto manifest = gen_dataset(100, 5, dir);
  EXPECT_EQ(manifest.at("items").size(), 100u);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    files += e.is_regular_file() && e.path().extension() == ".png";
  EXPECT_EQ(files, 300u);

  std::set<std::uint64_t> train, val;
  for (const auto& it : manifest.at("items"))
    (it.at("split") == "val" ? val : train).insert(it.at("index").get<std::uint64_t>());
  EXPECT_EQ(val.size(), 10u);
  EXPECT_EQ(train.size(), 90u);
  for (auto v : val) EXPECT_EQ(train.count(v), 0u);

  const Dataset d = load_dataset(dir);
  ASSERT_EQ(d.items.size(), 100u);
  for (const auto& item : d.items) {
    const Scene sc = gen_scene(item.seed);
    EXPECT_EQ(item.rgb, sc.rgb);  // colours live on the 8-bit grid
    EXPECT_EQ(item.sketch, sc.sketch);
    for (std::size_t k = 0; k < sc.palette.size(); ++k)
      EXPECT_NEAR(item.palette.values()[k], sc.palette.values()[k], 0.5 / 255 + 1e-12);
  }
}

TEST(Toyworld, RegenerationIsByteIdentical) {
  const auto a = fresh_dir("a"), b = fresh_dir("b");
  gen_dataset(12, 9, a);
  gen_dataset(12, 9, b);
  for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a);
    EXPECT_EQ(detail::read_file(e.path()), detail::read_file(b / rel)) << rel;
  }
}

TEST(Toyworld, Errors) {
  EXPECT_THROW(gen_dataset(0, 1, fresh_dir("zero")), Error);
  EXPECT_THROW(load_dataset(fresh_dir("missing")), Error);
  EXPECT_THROW(make_recipe(1, 8), Error);
}

TEST(Toyworld, LargerCanvas) {
  ToyworldOptions o;
  o.canvas = 64;
  const Scene sc = gen_scene(3, o);
  EXPECT_EQ(sc.rgb.shape(), (Shape{64, 64, 3}));
  EXPECT_GT(white_fraction(sc.sketch), 0.0);
}
