#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "toddler/checkpoint.hpp"
#include "toddler/core.hpp"
#include "toddler/image_io.hpp"

using namespace toddler;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "toddler_test_core";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.metadata = {{"stage", 1}, {"schedule", "linear"}, {"T", 10}, {"preset", "small"}, {"epochs", 3}, {"seed", 7}};
  ck.tensors.push_back({"a", {2, 3}, {1.f, -2.5f, 3.25f, 0.f, 1e-8f, -0.f}});
  ck.tensors.push_back({"b", {4}, {0.1f, 0.2f, 0.3f, 0.4f}});
  return ck;
}

}  // namespace

TEST(ImageGrid, ClampsImageRoleButNotFieldRole) {
  ImageGrid img({1, 2, 1}, {-0.5, 1.5});
  EXPECT_EQ(img.at(0, 0), 0.0);
  EXPECT_EQ(img.at(0, 1), 1.0);
  ImageGrid f = ImageGrid::field({1, 2, 1}, {-0.5, 1.5});
  EXPECT_EQ(f.at(0, 0), -0.5);
  EXPECT_EQ(f.at(0, 1), 1.5);
}

TEST(ImageGrid, RejectsBadShapesAndValues) {
  EXPECT_THROW(ImageGrid({0, 2, 1}), Error);
  EXPECT_THROW(ImageGrid({2, 2, 1}, std::vector<double>(3, 0.0)), Error);
  EXPECT_THROW(ImageGrid::field({1, 1, 1}, {std::nan("")}), Error);
}

TEST(SeededRng, SameSeedSameDraws) {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 0xFFFFFFFFFFFFull}) {
    SeededRng a(seed), b(seed);
    for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  }
}

TEST(SeededRng, StreamsDiffer) {
  SeededRng a(5, 0), b(5, 1);
  int equal = 0;
  for (int i = 0; i < 1000; ++i) equal += a.next_u64() == b.next_u64();
  EXPECT_EQ(equal, 0);
  // Split is a pure function of (seed, stream, sub), independent of draws made so far.
  SeededRng c(9);
  const SeededRng s1 = c.split(3);
  c.next_u64();
  SeededRng s2 = c.split(3);
  SeededRng s1c = s1;
  EXPECT_EQ(s1c.next_u64(), s2.next_u64());
}

TEST(SeededRng, StreamCorrelationIsSmall) {
  SeededRng a(11, 100), b(11, 101);
  const int n = 200000;
  double sab = 0, sa = 0, sb = 0, saa = 0, sbb = 0;
  for (int i = 0; i < n; ++i) {
    const double x = a.normal(), y = b.normal();
    sab += x * y;
    sa += x;
    sb += y;
    saa += x * x;
    sbb += y * y;
  }
  const double cov = sab / n - (sa / n) * (sb / n);
  const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
  EXPECT_LT(std::abs(corr), 5.0 / std::sqrt(n));
}

TEST(GaussianField, Deterministic) {
  SeededRng a(7), b(7);
  EXPECT_EQ(gaussian_field(a, {2, 2, 1}, false), gaussian_field(b, {2, 2, 1}, false));
}

TEST(GaussianField, GrayReplicatesChannels) {
  SeededRng rng(3);
  const ImageGrid g = gaussian_field(rng, {2, 2, 3}, true);
  EXPECT_EQ(g.role(), GridRole::field);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      EXPECT_EQ(g.at(y, x, 0), g.at(y, x, 1));
      EXPECT_EQ(g.at(y, x, 1), g.at(y, x, 2));
    }
}

TEST(GaussianField, ZeroShapeIsAnError) {
  SeededRng rng(1);
  EXPECT_THROW(gaussian_field(rng, {0, 4, 1}, false), Error);
}

TEST(GaussianField, MomentsOfAMillionDraws) {
  SeededRng rng(2024);
  const ImageGrid g = gaussian_field(rng, {1000, 1000, 1}, false);
  double sum = 0, sq = 0;
  for (double v : g.values()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(g.size());
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 0.005);
  EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.01);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint ck = sample_checkpoint();
  const auto path = temp_path("round.tdlr");
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.version, ck.version);
  EXPECT_EQ(back.metadata, ck.metadata);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    ASSERT_EQ(back.tensors[i].values.size(), ck.tensors[i].values.size());
    for (std::size_t k = 0; k < ck.tensors[i].values.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back.tensors[i].values[k]),
                std::bit_cast<std::uint32_t>(ck.tensors[i].values[k]));
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, BadMagic) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  std::copy_n("XXXX", 4, bytes.begin());
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::bad_magic);
  }
}

TEST(Checkpoint, TruncatedTensorSection) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes.resize(bytes.size() - 6);
  const auto path = temp_path("truncated.tdlr");
  detail::write_file(path, bytes);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::truncated);
  }
}

TEST(Checkpoint, UnsupportedVersion) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[4] = 99;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unsupported_version);
  }
}

TEST(ImageIo, PngRoundTripAtEightBits) {
  SeededRng rng(4);
  std::vector<double> v(5 * 7 * 3);
  for (auto& x : v) x = static_cast<double>(rng.below(256)) / 255.0;
  const ImageGrid img({5, 7, 3}, v);
  const ImageGrid back = decode_png(encode_png(img));
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(back.values()[i], img.values()[i]);

  const ImageGrid gray = ImageGrid({3, 3, 1}, {0, 1, 0, 1, 0, 1, 0, 1, 1});
  EXPECT_EQ(decode_png(encode_png(gray)), gray);
  EXPECT_EQ(encode_png(gray), encode_png(gray));
}

TEST(ImageIo, RejectsGarbage) {
  EXPECT_THROW(decode_png({1, 2, 3, 4, 5, 6, 7, 8, 9}), Error);
}

TEST(ImageIo, PpmHeader) {
  const auto path = temp_path("img.ppm");
  write_ppm(path, ImageGrid::filled({2, 3, 1}, 1.0));
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w, h, maxv;
  in >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxv, 255);
  EXPECT_EQ(std::filesystem::file_size(path), 11u + 2 * 3 * 3);
}
