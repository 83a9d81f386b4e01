#pragma once

// x0-predicting denoiser p(x0 | x_t, y, t) with hand-written reverse-mode
// gradients and an Adam optimizer.
//
// Graph (width W, B residual blocks, dilations 1,2,4,8 inside each block):
//
//   h = conv3x3(concat(x_t, y))
//   per block:  h += A e(t) + c
//               for d in {1,2,4,8}:  h += conv3x3_d(silu(h))
//   x0_hat = conv3x3(silu(h))
//
// e(t) is a 32-d sinusoidal embedding of the normalized time t/T. All
// convolutions use replication padding. Activations are stored channel-major
// as (C x N) matrices with N = batch * H * W so every convolution is one GEMM
// over an im2col buffer.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "checkpoint.hpp"
#include "core.hpp"

namespace toddler {

enum class Preset { small, medium, large };

inline std::string to_string(Preset p) {
  switch (p) {
    case Preset::small: return "small";
    case Preset::medium: return "medium";
    case Preset::large: return "large";
  }
  return "?";
}

inline Preset parse_preset(std::string_view s) {
  if (s == "small") return Preset::small;
  if (s == "medium") return Preset::medium;
  if (s == "large") return Preset::large;
  throw Error(ErrorKind::config, "unknown preset '" + std::string(s) + "'");
}

struct PresetConfig {
  int width;
  int blocks;
};

inline PresetConfig preset_config(Preset p) {
  switch (p) {
    case Preset::small: return {16, 1};
    case Preset::medium: return {32, 2};
    case Preset::large: return {64, 3};
  }
  return {16, 1};
}

inline constexpr int kTimeEmbedDim = 32;
inline constexpr std::array<int, 4> kBlockDilations{1, 2, 4, 8};

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace nn {

struct Geometry {
  int batch = 0;
  int height = 0;
  int width = 0;
  Eigen::Index hw() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index n() const { return hw() * batch; }
};

// col((ci*9 + k), j) = in(ci, shifted j), taps k = (ky+1)*3 + (kx+1), replicated border.
template <class S>
void im2col(const Mat<S>& in, const Geometry& g, int d, Mat<S>& col) {
  const Eigen::Index C = in.rows();
  col.resize(C * 9, g.n());
  const int H = g.height, W = g.width;
  for (Eigen::Index ci = 0; ci < C; ++ci) {
    const S* src_row = in.row(ci).data();
    for (int ky = -1; ky <= 1; ++ky)
      for (int kx = -1; kx <= 1; ++kx) {
        S* dst_row = col.row(ci * 9 + (ky + 1) * 3 + (kx + 1)).data();
        const int off = kx * d;
        const int lo = std::clamp(-off, 0, W);
        const int hi = std::clamp(W - off, lo, W);
        for (int b = 0; b < g.batch; ++b)
          for (int y = 0; y < H; ++y) {
            const int sy = std::clamp(y + ky * d, 0, H - 1);
            const S* src = src_row + b * g.hw() + static_cast<Eigen::Index>(sy) * W;
            S* dst = dst_row + b * g.hw() + static_cast<Eigen::Index>(y) * W;
            for (int x = 0; x < lo; ++x) dst[x] = src[std::clamp(x + off, 0, W - 1)];
            for (int x = lo; x < hi; ++x) dst[x] = src[x + off];
            for (int x = hi; x < W; ++x) dst[x] = src[std::clamp(x + off, 0, W - 1)];
          }
      }
  }
}

template <class S>
void col2im_add(const Mat<S>& col, const Geometry& g, int d, Mat<S>& in_grad) {
  const Eigen::Index C = in_grad.rows();
  const int H = g.height, W = g.width;
  for (Eigen::Index ci = 0; ci < C; ++ci) {
    S* dst_row = in_grad.row(ci).data();
    for (int ky = -1; ky <= 1; ++ky)
      for (int kx = -1; kx <= 1; ++kx) {
        const S* src_row = col.row(ci * 9 + (ky + 1) * 3 + (kx + 1)).data();
        const int off = kx * d;
        const int lo = std::clamp(-off, 0, W);
        const int hi = std::clamp(W - off, lo, W);
        for (int b = 0; b < g.batch; ++b)
          for (int y = 0; y < H; ++y) {
            const int sy = std::clamp(y + ky * d, 0, H - 1);
            S* dst = dst_row + b * g.hw() + static_cast<Eigen::Index>(sy) * W;
            const S* src = src_row + b * g.hw() + static_cast<Eigen::Index>(y) * W;
            for (int x = 0; x < lo; ++x) dst[std::clamp(x + off, 0, W - 1)] += src[x];
            for (int x = lo; x < hi; ++x) dst[x + off] += src[x];
            for (int x = hi; x < W; ++x) dst[std::clamp(x + off, 0, W - 1)] += src[x];
          }
      }
  }
}

template <class S>
Mat<S> silu(const Mat<S>& h) {
  return (h.array() / (S(1) + (-h.array()).exp())).matrix();
}

template <class S>
Mat<S> silu_grad(const Mat<S>& h) {
  const auto sig = (S(1) / (S(1) + (-h.array()).exp())).eval();
  return (sig * (S(1) + h.array() * (S(1) - sig))).matrix();
}

}  // namespace nn

/// Parameters or gradients, in the fixed layer order of the graph.
template <class S>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::vector<S>> values;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  ParamSet zeros_like() const {
    ParamSet z{names, shapes, {}};
    for (const auto& v : values) z.values.emplace_back(v.size(), S(0));
    return z;
  }
};

template <class S>
struct LossAndGrads {
  double loss = 0.0;
  ParamSet<S> grads;
};

/// One supervised example: predict `target` (x~0) from (x_t, y, t/T).
struct TrainExample {
  ImageGrid x_t;
  ImageGrid y;
  double tau = 0.0;
  ImageGrid target;
};

template <class S>
class Denoiser {
 public:
  Denoiser() = default;

  /// He-normal weights (variance 2/fan_in), zero biases.
  static Denoiser init(Preset preset, int x_channels, int y_channels, std::uint64_t seed) {
    require(x_channels >= 1 && y_channels >= 1, ErrorKind::invalid_argument, "Denoiser: channel counts must be >= 1");
    Denoiser d;
    d.preset_ = preset;
    d.x_channels_ = x_channels;
    d.y_channels_ = y_channels;
    const PresetConfig cfg = preset_config(preset);
    d.width_ = cfg.width;
    d.blocks_ = cfg.blocks;
    d.layout();
    SeededRng root(seed, 0xD3A015E5ull);
    for (std::size_t i = 0; i < d.params_.values.size(); ++i) {
      const auto& shape = d.params_.shapes[i];
      if (shape.size() != 2) continue;  // biases stay zero
      SeededRng rng = root.split(i);
      const double sd = std::sqrt(2.0 / static_cast<double>(shape[1]));
      for (S& w : d.params_.values[i]) w = static_cast<S>(sd * rng.normal());
    }
    return d;
  }

  Preset preset() const { return preset_; }
  int x_channels() const { return x_channels_; }
  int y_channels() const { return y_channels_; }
  int width() const { return width_; }
  int blocks() const { return blocks_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }

  /// x0 prediction for one (x_t, y) pair at normalized time tau = t/T.
  ImageGrid forward(const ImageGrid& x_t, const ImageGrid& y, double tau) const {
    const std::array<const ImageGrid*, 1> xs{&x_t};
    const std::array<const ImageGrid*, 1> ys{&y};
    const std::array<double, 1> taus{tau};
    return forward_batch(xs, ys, taus).front();
  }

  std::vector<ImageGrid> forward_batch(std::span<const ImageGrid* const> xs, std::span<const ImageGrid* const> ys,
                                       std::span<const double> taus) const {
    require(!xs.empty() && xs.size() == ys.size() && xs.size() == taus.size(), ErrorKind::invalid_argument,
            "Denoiser: batch size mismatch");
    nn::Geometry g;
    Mat<S> in = pack_inputs(xs, ys, g);
    Mat<S> out = run(in, taus, g, nullptr);
    return unpack(out, g);
  }

  /// Mean squared error over every element of the batch, and its gradient.
  LossAndGrads<S> loss_and_grads(std::span<const TrainExample> batch) const {
    require(!batch.empty(), ErrorKind::invalid_argument, "loss_and_grads: empty batch");
    std::vector<const ImageGrid*> xs, ys;
    std::vector<double> taus;
    for (const auto& e : batch) {
      xs.push_back(&e.x_t);
      ys.push_back(&e.y);
      taus.push_back(e.tau);
      require(e.target.height() == e.x_t.height() && e.target.width() == e.x_t.width() &&
                  e.target.channels() == x_channels_,
              ErrorKind::shape_mismatch, "loss_and_grads: target shape mismatch");
    }
    nn::Geometry g;
    Mat<S> in = pack_inputs(xs, ys, g);
    Cache cache;
    Mat<S> out = run(in, taus, g, &cache);

    Mat<S> diff(out.rows(), out.cols());
    for (int b = 0; b < g.batch; ++b) {
      const auto& tv = batch[b].target.values();
      for (Eigen::Index p = 0; p < g.hw(); ++p)
        for (int c = 0; c < x_channels_; ++c)
          diff(c, b * g.hw() + p) = out(c, b * g.hw() + p) - static_cast<S>(tv[p * x_channels_ + c]);
    }
    const double count = static_cast<double>(diff.size());
    LossAndGrads<S> r;
    r.loss = static_cast<double>(diff.array().square().sum()) / count;
    Mat<S> d_out = diff * static_cast<S>(2.0 / count);
    r.grads = params_.zeros_like();
    backward(cache, d_out, r.grads);
    return r;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.metadata["denoiser"] = {{"preset", to_string(preset_)}, {"x_channels", x_channels_}, {"y_channels", y_channels_}};
    for (std::size_t i = 0; i < params_.values.size(); ++i) {
      Tensor t;
      t.name = params_.names[i];
      t.shape.assign(params_.shapes[i].begin(), params_.shapes[i].end());
      t.values.assign(params_.values[i].begin(), params_.values[i].end());
      ck.tensors.push_back(std::move(t));
    }
    return ck;
  }

  static Denoiser from_checkpoint(const Checkpoint& ck) {
    require(ck.metadata.contains("denoiser"), ErrorKind::invalid_argument, "checkpoint: no denoiser metadata");
    const auto& m = ck.metadata["denoiser"];
    Denoiser d;
    d.preset_ = parse_preset(m.at("preset").get<std::string>());
    d.x_channels_ = m.at("x_channels").get<int>();
    d.y_channels_ = m.at("y_channels").get<int>();
    const PresetConfig cfg = preset_config(d.preset_);
    d.width_ = cfg.width;
    d.blocks_ = cfg.blocks;
    d.layout();
    for (std::size_t i = 0; i < d.params_.values.size(); ++i) {
      const Tensor& t = ck.at(d.params_.names[i]);
      require(t.values.size() == d.params_.values[i].size(), ErrorKind::shape_mismatch,
              "checkpoint: tensor '" + t.name + "' has the wrong size");
      for (std::size_t k = 0; k < t.values.size(); ++k) d.params_.values[i][k] = static_cast<S>(t.values[k]);
    }
    return d;
  }

  static Mat<S> time_embedding(std::span<const double> taus) {
    Mat<S> e(kTimeEmbedDim, static_cast<Eigen::Index>(taus.size()));
    constexpr int half = kTimeEmbedDim / 2;
    for (std::size_t b = 0; b < taus.size(); ++b)
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = taus[b] * 1000.0 * freq;
        e(i, static_cast<Eigen::Index>(b)) = static_cast<S>(std::sin(arg));
        e(half + i, static_cast<Eigen::Index>(b)) = static_cast<S>(std::cos(arg));
      }
    return e;
  }

 private:
  struct Cache {
    nn::Geometry g;
    Mat<S> input;
    Mat<S> embed;
    std::vector<Mat<S>> pre;  // residual stream before each silu, plus the final stream
  };

  // Parameter indices.
  std::size_t conv_in_w() const { return 0; }
  std::size_t block_base(int b) const { return 2 + static_cast<std::size_t>(b) * (2 + 2 * kBlockDilations.size()); }
  std::size_t time_w(int b) const { return block_base(b); }
  std::size_t conv_w(int b, int k) const { return block_base(b) + 2 + 2 * static_cast<std::size_t>(k); }
  std::size_t conv_out_w() const { return block_base(blocks_); }

  void layout() {
    params_ = {};
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      params_.names.push_back(std::move(name));
      params_.shapes.push_back(std::move(shape));
      params_.values.emplace_back(n, S(0));
    };
    const auto W = static_cast<std::size_t>(width_);
    const auto cin = static_cast<std::size_t>(x_channels_ + y_channels_);
    add("conv_in.weight", {W, cin * 9});
    add("conv_in.bias", {W});
    for (int b = 0; b < blocks_; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      add(p + "time.weight", {W, static_cast<std::size_t>(kTimeEmbedDim)});
      add(p + "time.bias", {W});
      for (std::size_t k = 0; k < kBlockDilations.size(); ++k) {
        add(p + "conv" + std::to_string(k) + ".weight", {W, W * 9});
        add(p + "conv" + std::to_string(k) + ".bias", {W});
      }
    }
    add("conv_out.weight", {static_cast<std::size_t>(x_channels_), W * 9});
    add("conv_out.bias", {static_cast<std::size_t>(x_channels_)});
  }

  Eigen::Map<const Mat<S>> weight(std::size_t i) const {
    const auto& sh = params_.shapes[i];
    return {params_.values[i].data(), static_cast<Eigen::Index>(sh[0]), static_cast<Eigen::Index>(sh[1])};
  }
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bias(std::size_t i) const {
    return {params_.values[i].data(), static_cast<Eigen::Index>(params_.values[i].size())};
  }

  Mat<S> pack_inputs(std::span<const ImageGrid* const> xs, std::span<const ImageGrid* const> ys, nn::Geometry& g) const {
    g.batch = static_cast<int>(xs.size());
    g.height = xs.front()->height();
    g.width = xs.front()->width();
    const int cin = x_channels_ + y_channels_;
    Mat<S> in(cin, g.n());
    for (int b = 0; b < g.batch; ++b) {
      const ImageGrid& x = *xs[b];
      const ImageGrid& y = *ys[b];
      require(x.channels() == x_channels_ && y.channels() == y_channels_, ErrorKind::shape_mismatch,
              "Denoiser: channel mismatch");
      require(x.height() == g.height && x.width() == g.width && y.height() == g.height && y.width() == g.width,
              ErrorKind::shape_mismatch, "Denoiser: spatial size mismatch");
      for (Eigen::Index p = 0; p < g.hw(); ++p) {
        for (int c = 0; c < x_channels_; ++c) in(c, b * g.hw() + p) = static_cast<S>(x.values()[p * x_channels_ + c]);
        for (int c = 0; c < y_channels_; ++c)
          in(x_channels_ + c, b * g.hw() + p) = static_cast<S>(y.values()[p * y_channels_ + c]);
      }
    }
    return in;
  }

  std::vector<ImageGrid> unpack(const Mat<S>& out, const nn::Geometry& g) const {
    std::vector<ImageGrid> res;
    Shape s{g.height, g.width, x_channels_};
    for (int b = 0; b < g.batch; ++b) {
      std::vector<double> v(s.size());
      for (Eigen::Index p = 0; p < g.hw(); ++p)
        for (int c = 0; c < x_channels_; ++c) v[p * x_channels_ + c] = static_cast<double>(out(c, b * g.hw() + p));
      res.push_back(ImageGrid::field(s, std::move(v)));
    }
    return res;
  }

  Mat<S> conv(const Mat<S>& in, std::size_t w_index, int dilation, const nn::Geometry& g) const {
    Mat<S> col;
    nn::im2col(in, g, dilation, col);
    Mat<S> out = weight(w_index) * col;
    out.colwise() += bias(w_index + 1);
    return out;
  }

  // Accumulates weight/bias gradients; returns the input gradient when asked.
  Mat<S> conv_backward(const Mat<S>& in, const Mat<S>& d_out, std::size_t w_index, int dilation, const nn::Geometry& g,
                       ParamSet<S>& grads, bool need_input_grad) const {
    Mat<S> col;
    nn::im2col(in, g, dilation, col);
    const auto& sh = params_.shapes[w_index];
    Eigen::Map<Mat<S>> dw(grads.values[w_index].data(), static_cast<Eigen::Index>(sh[0]),
                          static_cast<Eigen::Index>(sh[1]));
    dw.noalias() += d_out * col.transpose();
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> db(grads.values[w_index + 1].data(),
                                                       static_cast<Eigen::Index>(grads.values[w_index + 1].size()));
    db += d_out.rowwise().sum();
    Mat<S> d_in;
    if (need_input_grad) {
      Mat<S> d_col = weight(w_index).transpose() * d_out;
      d_in = Mat<S>::Zero(in.rows(), in.cols());
      nn::col2im_add(d_col, g, dilation, d_in);
    }
    return d_in;
  }

  Mat<S> run(const Mat<S>& in, std::span<const double> taus, const nn::Geometry& g, Cache* cache) const {
    const Mat<S> embed = time_embedding(taus);
    Mat<S> h = conv(in, conv_in_w(), 1, g);
    for (int b = 0; b < blocks_; ++b) {
      Mat<S> shift = weight(time_w(b)) * embed;
      shift.colwise() += bias(time_w(b) + 1);
      for (int s = 0; s < g.batch; ++s) h.middleCols(s * g.hw(), g.hw()).colwise() += shift.col(s);
      for (std::size_t k = 0; k < kBlockDilations.size(); ++k) {
        if (cache) cache->pre.push_back(h);
        h += conv(nn::silu(h), conv_w(b, static_cast<int>(k)), kBlockDilations[k], g);
      }
    }
    if (cache) {
      cache->pre.push_back(h);
      cache->g = g;
      cache->input = in;
      cache->embed = embed;
    }
    return conv(nn::silu(h), conv_out_w(), 1, g);
  }

  void backward(const Cache& cache, const Mat<S>& d_out, ParamSet<S>& grads) const {
    const nn::Geometry& g = cache.g;
    std::size_t idx = cache.pre.size() - 1;
    Mat<S> dh = conv_backward(nn::silu(cache.pre[idx]), d_out, conv_out_w(), 1, g, grads, true)
                    .cwiseProduct(nn::silu_grad(cache.pre[idx]));
    for (int b = blocks_ - 1; b >= 0; --b) {
      for (int k = static_cast<int>(kBlockDilations.size()) - 1; k >= 0; --k) {
        --idx;
        const Mat<S>& pre = cache.pre[idx];
        dh += conv_backward(nn::silu(pre), dh, conv_w(b, k), kBlockDilations[k], g, grads, true)
                  .cwiseProduct(nn::silu_grad(pre));
      }
      Mat<S> d_shift(width_, g.batch);
      for (int s = 0; s < g.batch; ++s) d_shift.col(s) = dh.middleCols(s * g.hw(), g.hw()).rowwise().sum();
      const auto& sh = params_.shapes[time_w(b)];
      Eigen::Map<Mat<S>> dA(grads.values[time_w(b)].data(), static_cast<Eigen::Index>(sh[0]),
                            static_cast<Eigen::Index>(sh[1]));
      dA.noalias() += d_shift * cache.embed.transpose();
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> dc(grads.values[time_w(b) + 1].data(), width_);
      dc += d_shift.rowwise().sum();
    }
    conv_backward(cache.input, dh, conv_in_w(), 1, g, grads, false);
  }

  Preset preset_ = Preset::small;
  int x_channels_ = 1;
  int y_channels_ = 1;
  int width_ = 16;
  int blocks_ = 1;
  ParamSet<S> params_;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
struct OptimState {
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimState for_params(const ParamSet<S>& p, double lr = 1e-3) {
    OptimState s;
    s.learning_rate = lr;
    for (const auto& v : p.values) {
      s.m.emplace_back(v.size(), S(0));
      s.v.emplace_back(v.size(), S(0));
    }
    return s;
  }
};

/// Bias-corrected Adam update. Non-finite gradients abort before any change.
template <class S>
void optim_step(ParamSet<S>& params, OptimState<S>& st, const ParamSet<S>& grads) {
  require(grads.values.size() == params.values.size() && st.m.size() == params.values.size(),
          ErrorKind::shape_mismatch, "optim_step: parameter structure mismatch");
  for (std::size_t i = 0; i < grads.values.size(); ++i) {
    require(grads.values[i].size() == params.values[i].size() && st.m[i].size() == params.values[i].size(),
            ErrorKind::shape_mismatch, "optim_step: parameter size mismatch");
    for (S g : grads.values[i]) require(std::isfinite(static_cast<double>(g)), ErrorKind::numeric, "optim_step: non-finite gradient");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const S b1 = static_cast<S>(st.beta1), b2 = static_cast<S>(st.beta2);
  for (std::size_t i = 0; i < grads.values.size(); ++i) {
    auto& p = params.values[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads.values[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (S(1) - b1) * g[k];
      v[k] = b2 * v[k] + (S(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(m[k]) / c1;
      const double vhat = static_cast<double>(v[k]) / c2;
      p[k] -= static_cast<S>(st.learning_rate * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

template <class S>
void optim_step(Denoiser<S>& model, OptimState<S>& st, const ParamSet<S>& grads) {
  optim_step(model.params(), st, grads);
}

}  // namespace toddler
