#include <gtest/gtest.h>

#include "toddler/denoiser.hpp"

using namespace toddler;

namespace {

ImageGrid noise(SeededRng& rng, int h, int w, int c) { return gaussian_field(rng, {h, w, c}, false); }

std::vector<TrainExample> make_batch(SeededRng& rng, int n, int h, int w, int xc, int yc) {
  std::vector<TrainExample> out;
  for (int i = 0; i < n; ++i)
    out.push_back({noise(rng, h, w, xc), noise(rng, h, w, yc), rng.uniform(), noise(rng, h, w, xc)});
  return out;
}

}  // namespace

TEST(Denoiser, OutputShapeFollowsXChannels) {
  const auto d = Denoiser<float>::init(Preset::small, 3, 1, 1);
  SeededRng rng(1);
  const ImageGrid out = d.forward(noise(rng, 8, 8, 3), noise(rng, 8, 8, 1), 0.5);
  EXPECT_EQ(out.shape(), (Shape{8, 8, 3}));
  EXPECT_EQ(out.role(), GridRole::field);
  EXPECT_THROW(d.forward(noise(rng, 8, 8, 1), noise(rng, 8, 8, 1), 0.5), Error);
}

TEST(Denoiser, PresetsGrowInSize) {
  const auto s = Denoiser<float>::init(Preset::small, 1, 1, 0);
  const auto m = Denoiser<float>::init(Preset::medium, 1, 1, 0);
  const auto l = Denoiser<float>::init(Preset::large, 1, 1, 0);
  EXPECT_LT(s.parameter_count(), m.parameter_count());
  EXPECT_LT(m.parameter_count(), l.parameter_count());
  EXPECT_EQ(parse_preset("medium"), Preset::medium);
  EXPECT_THROW(parse_preset("huge"), Error);
}

TEST(Denoiser, SameSeedSameWeightsAndOutputs) {
  const auto a = Denoiser<float>::init(Preset::small, 1, 1, 42);
  const auto b = Denoiser<float>::init(Preset::small, 1, 1, 42);
  const auto c = Denoiser<float>::init(Preset::small, 1, 1, 43);
  EXPECT_EQ(a.params().values, b.params().values);
  EXPECT_NE(a.params().values, c.params().values);
  SeededRng rng(2);
  const ImageGrid x = noise(rng, 6, 6, 1), y = noise(rng, 6, 6, 1);
  EXPECT_EQ(a.forward(x, y, 0.3), b.forward(x, y, 0.3));
}

TEST(Denoiser, BatchMatchesSingle) {
  const auto d = Denoiser<double>::init(Preset::small, 3, 3, 5);
  SeededRng rng(3);
  const ImageGrid x1 = noise(rng, 5, 7, 3), y1 = noise(rng, 5, 7, 3);
  const ImageGrid x2 = noise(rng, 5, 7, 3), y2 = noise(rng, 5, 7, 3);
  const std::array<const ImageGrid*, 2> xs{&x1, &x2}, ys{&y1, &y2};
  const std::array<double, 2> taus{0.1, 0.9};
  const auto out = d.forward_batch(xs, ys, taus);
  const auto s1 = d.forward(x1, y1, 0.1), s2 = d.forward(x2, y2, 0.9);
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_NEAR(out[0].values()[i], s1.values()[i], 1e-12);
    EXPECT_NEAR(out[1].values()[i], s2.values()[i], 1e-12);
  }
}

TEST(Denoiser, TimeInputChangesOutput) {
  const auto d = Denoiser<double>::init(Preset::small, 1, 1, 6);
  SeededRng rng(4);
  const ImageGrid x = noise(rng, 6, 6, 1), y = noise(rng, 6, 6, 1);
  const ImageGrid a = d.forward(x, y, 0.1), b = d.forward(x, y, 0.7);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.values()[i] - b.values()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Denoiser, ReceptiveFieldSpansCanvas) {
  // A change at the centre of the condition must reach every corner.
  const auto d = Denoiser<double>::init(Preset::small, 1, 1, 7);
  SeededRng rng(5);
  const ImageGrid x = noise(rng, 32, 32, 1);
  ImageGrid y = noise(rng, 32, 32, 1);
  std::vector<double> yv = y.values();
  const ImageGrid base = d.forward(x, y, 0.5);
  yv[16 * 32 + 16] += 1.0;
  const ImageGrid moved = d.forward(x, ImageGrid::field({32, 32, 1}, yv), 0.5);
  for (auto [r, c] : {std::pair{0, 0}, {0, 31}, {31, 0}, {31, 31}})
    EXPECT_GT(std::abs(moved.at(r, c) - base.at(r, c)), 0.0) << r << "," << c;
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  auto d = Denoiser<double>::init(Preset::small, 3, 1, 8);
  SeededRng rng(6);
  // Non-zero biases so every parameter path is exercised.
  for (std::size_t i = 0; i < d.params().values.size(); ++i)
    if (d.params().shapes[i].size() == 1)
      for (double& b : d.params().values[i]) b = 0.1 * rng.normal();
  const auto batch = make_batch(rng, 2, 5, 6, 3, 1);
  const auto lg = d.loss_and_grads(batch);
  int checked = 0;
  for (std::size_t i = 0; i < d.params().values.size(); ++i) {
    auto& v = d.params().values[i];
    for (int probe = 0; probe < 4; ++probe) {
      const std::size_t k = rng.below(v.size());
      const double orig = v[k], h = 1e-5;
      v[k] = orig + h;
      const double up = d.loss_and_grads(batch).loss;
      v[k] = orig - h;
      const double down = d.loss_and_grads(batch).loss;
      v[k] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = lg.grads.values[i][k];
      EXPECT_LT(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8}), 1e-6) << d.params().names[i] << "[" << k << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 20);
}

TEST(Denoiser, CheckpointRoundTrip) {
  const auto d = Denoiser<float>::init(Preset::medium, 3, 3, 9);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(d.to_checkpoint()));
  const auto back = Denoiser<float>::from_checkpoint(ck);
  EXPECT_EQ(back.params().values, d.params().values);
  EXPECT_EQ(back.preset(), Preset::medium);
  SeededRng rng(7);
  const ImageGrid x = noise(rng, 8, 8, 3), y = noise(rng, 8, 8, 3);
  EXPECT_EQ(back.forward(x, y, 0.4), d.forward(x, y, 0.4));
  Checkpoint broken = ck;
  broken.tensors.pop_back();
  EXPECT_THROW(Denoiser<float>::from_checkpoint(broken), Error);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<double> p{{"w"}, {{3}}, {{1.0, -2.0, 0.5}}};
  ParamSet<double> g{{"w"}, {{3}}, {{0.3, -4.0, 1e-3}}};
  auto st = OptimState<double>::for_params(p, 0.01);
  optim_step(p, st, g);
  // With bias correction the first update is lr * g / (|g| + eps) ~ lr * sign(g).
  EXPECT_NEAR(p.values[0][0], 1.0 - 0.01, 1e-7);
  EXPECT_NEAR(p.values[0][1], -2.0 + 0.01, 1e-7);
  EXPECT_NEAR(p.values[0][2], 0.5 - 0.01, 1e-6);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, ZeroGradientLeavesParamsAlone) {
  ParamSet<double> p{{"w"}, {{2}}, {{1.0, 2.0}}};
  auto g = p.zeros_like();
  auto st = OptimState<double>::for_params(p);
  optim_step(p, st, g);
  EXPECT_EQ(p.values[0], (std::vector<double>{1.0, 2.0}));
}

TEST(Adam, MinimisesQuadratic) {
  ParamSet<double> p{{"w"}, {{1}}, {{5.0}}};
  auto st = OptimState<double>::for_params(p, 0.1);
  for (int i = 0; i < 500; ++i) {
    ParamSet<double> g{{"w"}, {{1}}, {{2.0 * (p.values[0][0] - 1.5)}}};
    optim_step(p, st, g);
  }
  EXPECT_NEAR(p.values[0][0], 1.5, 1e-2);
}

TEST(Adam, NonFiniteGradientIsRejectedWithoutUpdate) {
  ParamSet<double> p{{"w"}, {{2}}, {{1.0, 2.0}}};
  ParamSet<double> g{{"w"}, {{2}}, {{0.5, std::numeric_limits<double>::infinity()}}};
  auto st = OptimState<double>::for_params(p);
  EXPECT_THROW(optim_step(p, st, g), Error);
  EXPECT_EQ(p.values[0], (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(st.step, 0);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  auto d = Denoiser<float>::init(Preset::small, 1, 1, 10);
  SeededRng rng(8);
  auto batch = make_batch(rng, 4, 8, 8, 1, 1);
  for (auto& e : batch) e.target = e.y.as(GridRole::field);  // learnable: copy the condition
  auto st = OptimState<float>::for_params(d.params(), 3e-3);
  const double first = d.loss_and_grads(batch).loss;
  double last = first;
  for (int i = 0; i < 150; ++i) {
    const auto lg = d.loss_and_grads(batch);
    last = lg.loss;
    optim_step(d, st, lg.grads);
  }
  EXPECT_LT(last, 0.2 * first);
}

TEST(Denoiser, InitVarianceFollowsFanIn) {
  const auto d = Denoiser<double>::init(Preset::medium, 3, 3, 11);
  int checked = 0;
  for (std::size_t i = 0; i < d.params().values.size(); ++i) {
    const auto& shape = d.params().shapes[i];
    const auto& v = d.params().values[i];
    if (shape.size() == 1) {
      for (double b : v) EXPECT_EQ(b, 0.0);
      continue;
    }
    if (v.size() < 1000) continue;
    double sq = 0;
    for (double w : v) sq += w * w;
    const double want = 2.0 / static_cast<double>(shape[1]);
    EXPECT_NEAR(sq / v.size(), want, 0.2 * want) << d.params().names[i];
    ++checked;
  }
  EXPECT_GT(checked, 3);
}

TEST(Denoiser, OutputBiasOnlyGivesConstant) {
  auto d = Denoiser<double>::init(Preset::small, 3, 3, 12);
  for (auto& v : d.params().values) std::fill(v.begin(), v.end(), 0.0);
  auto& names = d.params().names;
  const std::size_t out_b = std::find(names.begin(), names.end(), "conv_out.bias") - names.begin();
  ASSERT_LT(out_b, names.size());
  d.params().values[out_b] = {0.25, 0.5, 0.75};
  SeededRng rng(9);
  const ImageGrid out = d.forward(noise(rng, 32, 32, 3), noise(rng, 32, 32, 3), 0.3);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(out.at(r, c, ch), 0.25 * (ch + 1));
}

TEST(Denoiser, ConstantInputGivesConstantOutput) {
  const auto d = Denoiser<double>::init(Preset::small, 3, 1, 13);
  const ImageGrid out = d.forward(ImageGrid::filled({12, 12, 3}, 0.4, GridRole::field),
                                  ImageGrid::filled({12, 12, 1}, 0.7, GridRole::field), 0.5);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < 12; ++r)
      for (int c = 0; c < 12; ++c) EXPECT_NEAR(out.at(r, c, ch), out.at(0, 0, ch), 1e-12);
}

TEST(Denoiser, PerfectTargetsGiveZeroLossAndGradients) {
  const auto d = Denoiser<double>::init(Preset::small, 1, 1, 14);
  SeededRng rng(10);
  auto batch = make_batch(rng, 3, 6, 6, 1, 1);
  std::vector<const ImageGrid*> xs, ys;
  std::vector<double> taus;
  for (const auto& e : batch) {
    xs.push_back(&e.x_t);
    ys.push_back(&e.y);
    taus.push_back(e.tau);
  }
  const auto own = d.forward_batch(xs, ys, taus);
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i].target = own[i];
  const auto lg = d.loss_and_grads(batch);
  EXPECT_EQ(lg.loss, 0.0);
  for (const auto& g : lg.grads.values)
    for (double v : g) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(d.loss_and_grads({}), Error);
}

TEST(Denoiser, DuplicatedBatchLeavesLossAndGradients) {
  const auto d = Denoiser<double>::init(Preset::small, 1, 1, 15);
  SeededRng rng(11);
  auto batch = make_batch(rng, 3, 6, 6, 1, 1);
  const auto once = d.loss_and_grads(batch);
  auto twice_batch = batch;
  twice_batch.insert(twice_batch.end(), batch.begin(), batch.end());
  const auto twice = d.loss_and_grads(twice_batch);
  EXPECT_NEAR(once.loss, twice.loss, 1e-14 * once.loss);
  for (std::size_t i = 0; i < once.grads.values.size(); ++i)
    for (std::size_t k = 0; k < once.grads.values[i].size(); ++k)
      EXPECT_NEAR(once.grads.values[i][k], twice.grads.values[i][k], 1e-12 + 1e-10 * std::abs(once.grads.values[i][k]));
}

TEST(Denoiser, FiniteDifferencesSinglePrecision) {
  // Weights perturbed with h = 1e-3 * max(|theta|, 1); float roundoff dominates.
  auto d = Denoiser<float>::init(Preset::small, 1, 1, 16);
  SeededRng rng(12);
  auto batch = make_batch(rng, 2, 6, 6, 1, 1);
  const auto lg = d.loss_and_grads(batch);
  // Reference derivative from the double model, so only the analytic float path is judged.
  auto dd = Denoiser<double>::init(Preset::small, 1, 1, 16);
  for (std::size_t i = 0; i < d.params().values.size(); ++i)
    for (std::size_t k = 0; k < d.params().values[i].size(); ++k) dd.params().values[i][k] = d.params().values[i][k];
  double worst = 0;
  for (int probe = 0; probe < 100; ++probe) {
    const std::size_t i = rng.below(d.params().values.size());
    const std::size_t k = rng.below(d.params().values[i].size());
    double& w = dd.params().values[i][k];
    const double orig = w, h = 1e-3 * std::max(std::abs(orig), 1.0);
    w = orig + h;
    const double up = dd.loss_and_grads(batch).loss;
    w = orig - h;
    const double down = dd.loss_and_grads(batch).loss;
    w = orig;
    const double fd = (up - down) / (2 * h), an = lg.grads.values[i][k];
    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3}));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Denoiser, TrainingIsBitDeterministic) {
  auto run = [] {
    auto d = Denoiser<float>::init(Preset::small, 1, 1, 17);
    SeededRng rng(13);
    const auto batch = make_batch(rng, 2, 8, 8, 1, 1);
    auto st = OptimState<float>::for_params(d.params());
    for (int i = 0; i < 5; ++i) optim_step(d, st, d.loss_and_grads(batch).grads);
    return d.params().values;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, QuadraticBowlConverges) {
  SeededRng rng(14);
  ParamSet<double> p{{"w"}, {{16}}, {std::vector<double>(16, 0.0)}};
  std::vector<double> centre(16);
  for (auto& c : centre) c = rng.uniform(-1, 1);
  auto st = OptimState<double>::for_params(p, 0.05);
  double loss = 0;
  for (int i = 0; i < 500; ++i) {
    ParamSet<double> g = p.zeros_like();
    loss = 0;
    for (int k = 0; k < 16; ++k) {
      const double d = p.values[0][k] - centre[k];
      loss += d * d;
      g.values[0][k] = 2 * d;
    }
    optim_step(p, st, g);
  }
  EXPECT_LT(loss, 1e-6);
}
