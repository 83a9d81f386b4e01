#pragma once

// Desk-scale sweeps: scheduler, step trimming, joint train/sample steps,
// condition truncation and sketch augmentation. Every cell is an isolated
// seeded run; results come back as tidy tables (one row per cell).

#include <future>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "pipeline.hpp"

namespace toddler {

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    require(row.size() == columns.size(), ErrorKind::invalid_argument, "Table: row width mismatch");
    rows.push_back(std::move(row));
  }
  std::string csv() const {
    std::ostringstream o;
    for (std::size_t i = 0; i < columns.size(); ++i) o << (i ? "," : "") << columns[i];
    o << "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) o << (i ? "," : "") << r[i];
      o << "\n";
    }
    return o.str();
  }
  double number(std::size_t row, const std::string& col) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == col) return std::stod(rows.at(row)[i]);
    throw Error(ErrorKind::invalid_argument, "Table: no column '" + col + "'");
  }
};

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

enum class Sweep { scheduler, steps, train_steps_grid, truncation, augment };

inline Sweep parse_sweep(std::string_view s) {
  if (s == "scheduler") return Sweep::scheduler;
  if (s == "steps") return Sweep::steps;
  if (s == "train-steps-grid") return Sweep::train_steps_grid;
  if (s == "truncation") return Sweep::truncation;
  if (s == "augment") return Sweep::augment;
  throw Error(ErrorKind::config, "unknown sweep '" + std::string(s) + "'");
}

/// s in {0, T/20, T/10, T/5, 2T/5, 3T/5, 4T/5, T}, rounded, duplicates dropped.
inline std::vector<int> truncation_grid(int T) {
  std::vector<int> out;
  for (double f : {0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    const int s = static_cast<int>(std::lround(f * T));
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

inline ImageGrid mean_image(std::span<const ImageGrid> imgs) {
  require(!imgs.empty(), ErrorKind::invalid_argument, "mean_image: empty set");
  std::vector<double> acc(imgs.front().size(), 0.0);
  for (const auto& g : imgs) {
    require_same_shape(g, imgs.front(), "mean_image");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.values()[i];
  }
  for (double& v : acc) v /= static_cast<double>(imgs.size());
  return ImageGrid(imgs.front().shape(), std::move(acc));
}

/// Standard normal fields seen as images (clamped), i.e. a pure-noise x_T saved to disk.
inline std::vector<ImageGrid> noise_images(std::size_t n, Shape shape, std::uint64_t seed) {
  SeededRng rng(seed, 0x401Eull);
  std::vector<ImageGrid> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gaussian_field(rng, shape, false).as(GridRole::image));
  return out;
}

/// One stage run per condition, noise seeded by (seed, i).
inline std::vector<ImageGrid> sample_stage(const Denoiser<float>& model, const StageSpec& spec,
                                           std::span<const ImageGrid> ys, int steps, std::uint64_t seed) {
  std::vector<ImageGrid> out;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto noise = stage_noise(spec, ys[i].shape(), detail::mix64(seed * 7919 + i));
    RunStageOptions o;
    o.steps = steps;
    const ImageGrid x = run_stage(model, spec, ys[i], noise, o).x;
    out.push_back(spec.kind() == StageKind::sketch ? binarize(x) : quantize8(x));
  }
  return out;
}

struct SketchQuality {
  double f1 = 0;
  double white_fraction = 0;
};

inline SketchQuality sketch_quality(std::span<const ImageGrid> sketches, std::span<const ImageGrid> refs) {
  SketchQuality q;
  for (const auto& s : sketches) {
    q.f1 += nearest_contour_f1(s, refs, 1);
    q.white_fraction += white_fraction(s);
  }
  q.f1 /= static_cast<double>(sketches.size());
  q.white_fraction /= static_cast<double>(sketches.size());
  return q;
}

struct PipelineSamples {
  std::vector<ImageGrid> sketches, finals;
};

inline PipelineSamples sample_pipeline(const Pipeline& p, SamplerConfig base, std::size_t n, std::uint64_t seed0) {
  PipelineSamples out;
  for (std::size_t i = 0; i < n; ++i) {
    base.seed = seed0 + i;
    const SessionState s = run_pipeline(p, base);
    out.sketches.push_back(s.x_inter.front().image);
    out.finals.push_back(s.x_inter.back().image);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context: data split plus a cache of trained stages shared across sweeps
// ---------------------------------------------------------------------------

struct AblationOptions {
  std::vector<std::uint64_t> seeds{1};
  std::size_t samples = 100;  // generated images per evaluated cell
  std::vector<int> grid;      // step grid for steps sweeps
  int jobs = 1;
};

class AblationContext {
 public:
  AblationContext(const Dataset& data, TrainConfig train) : train_cfg_(train) {
    train_ = data.subset(Split::train);
    for (const DatasetItem* it : data.subset(Split::val)) {
      val_rgb_.push_back(it->rgb);
      val_sketch_.push_back(it->sketch);
      val_items_.push_back(it);
    }
    require(!train_.empty(), ErrorKind::invalid_argument, "ablation: no training items");
    require(val_rgb_.size() >= kMinFrechetSet, ErrorKind::invalid_argument,
            "ablation: need at least 32 validation items for toy_frechet, got " + std::to_string(val_rgb_.size()));
  }

  const TrainConfig& train_config() const { return train_cfg_; }
  std::span<const DatasetItem* const> train_items() const { return train_; }
  std::span<const DatasetItem* const> val_items() const { return val_items_; }
  std::span<const ImageGrid> val_rgb() const { return val_rgb_; }
  std::span<const ImageGrid> val_sketches() const { return val_sketch_; }
  std::ostream* log = nullptr;

  /// Trains (or fetches) stage j of `p` with the context's config, seed and overrides.
  Denoiser<float> stage_model(const PipelineSpec& p, int j, std::uint64_t seed, const TrainConfig* override_cfg = nullptr) {
    TrainConfig cfg = override_cfg ? *override_cfg : train_cfg_;
    cfg.seed = seed;
    if (j == 1) cfg.truncation = false;
    Json key = {{"stage", to_json(p.stage(j).config)}, {"j", j}, {"train", to_json(cfg)}};
    if (j > 1) key["stage1"] = to_json(p.stage(1).config);  // truncation samples stage 1's forward process
    if (j > 1 && p.size() == 3) key["n"] = 3;
    const std::string k = key.dump();
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(k); it != cache_.end()) return it->second;
    }
    if (log) *log << "  training stage " << j << " (" << to_string(p.stage(j).config.schedule) << ", T=" << p.stage(j).steps()
                  << ", seed " << seed << ")" << std::endl;
    Denoiser<float> m = train_stage(train_, p, j, cfg).model;
    std::lock_guard lock(mu_);
    cache_.emplace(k, m);
    return m;
  }

  /// Condition images for the validation set at stage j (GT sketches / palettes).
  std::vector<ImageGrid> val_conditions(const PipelineSpec& p, int j) const {
    std::vector<ImageGrid> ys;
    for (const DatasetItem* it : val_items_) ys.push_back(stage_condition(p, j, &it->sketch, &it->palette));
    return ys;
  }

 private:
  TrainConfig train_cfg_;
  std::vector<const DatasetItem*> train_;
  std::vector<const DatasetItem*> val_items_;
  std::vector<ImageGrid> val_rgb_, val_sketch_;
  std::mutex mu_;
  std::map<std::string, Denoiser<float>> cache_;
};

namespace detail {

// Runs cells with at most `jobs` in flight; rows keep cell order.
template <class Cell>
std::vector<std::vector<std::vector<std::string>>> run_cells(std::size_t n, int jobs, Cell cell) {
  std::vector<std::vector<std::vector<std::string>>> out(n);
  const std::size_t width = static_cast<std::size_t>(std::max(1, jobs));
  for (std::size_t start = 0; start < n; start += width) {
    std::vector<std::future<std::vector<std::vector<std::string>>>> fs;
    for (std::size_t i = start; i < std::min(n, start + width); ++i)
      fs.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async, cell, i));
    for (std::size_t i = 0; i < fs.size(); ++i) out[start + i] = fs[i].get();
  }
  return out;
}

inline Table collect(std::vector<std::string> cols, const std::vector<std::vector<std::vector<std::string>>>& cells) {
  Table t{std::move(cols), {}};
  for (const auto& c : cells)
    for (const auto& r : c) t.add(r);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Stage-1 contour F1 per schedule kind.
inline Table sweep_scheduler(AblationContext& ctx, const PipelineSpec& base, const AblationOptions& o) {
  const std::vector<ScheduleKind> kinds{ScheduleKind::linear, ScheduleKind::log, ScheduleKind::bridge};
  const std::size_t cells = o.seeds.size() * kinds.size();
  auto rows = detail::run_cells(cells, o.jobs, [&](std::size_t c) {
    const std::uint64_t seed = o.seeds[c / kinds.size()];
    const ScheduleKind kind = kinds[c % kinds.size()];
    std::vector<StageConfig> cs;
    for (const auto& s : base.stages) cs.push_back(s.config);
    cs[0].schedule = kind;
    const PipelineSpec p = PipelineSpec::make(cs, base.canvas, base.edge_threshold);
    const Denoiser<float> m = ctx.stage_model(p, 1, seed);
    const std::vector<ImageGrid> ys(o.samples, ImageGrid::filled(p.shape(1), 0.0));
    const auto sk = sample_stage(m, p.stage(1), ys, p.stage(1).steps(), seed + 1000);
    const SketchQuality q = sketch_quality(sk, ctx.val_sketches());
    return std::vector<std::vector<std::string>>{
        {std::to_string(seed), to_string(kind), std::to_string(p.stage(1).steps()), num(q.f1), num(q.white_fraction)}};
  });
  return detail::collect({"seed", "schedule", "T", "contour_f1", "white_fraction"}, rows);
}

/// Detailed stage on GT validation sketches: train at each T, sample at each
/// grid value <= T (all of them when `diagonal_only` is false).
inline Table sweep_steps(AblationContext& ctx, const PipelineSpec& base, const AblationOptions& o, bool diagonal_only) {
  std::vector<int> grid = o.grid.empty() ? std::vector<int>{10, 20, 50, 100} : o.grid;
  const std::size_t cells = o.seeds.size() * grid.size();
  const int last = static_cast<int>(base.size());
  auto rows = detail::run_cells(cells, o.jobs, [&](std::size_t c) {
    const std::uint64_t seed = o.seeds[c / grid.size()];
    const int T = grid[c % grid.size()];
    std::vector<StageConfig> cs;
    for (const auto& s : base.stages) cs.push_back(s.config);
    cs.back().steps = T;
    const PipelineSpec p = PipelineSpec::make(cs, base.canvas, base.edge_threshold);
    TrainConfig cfg = ctx.train_config();
    cfg.truncation = false;
    const Denoiser<float> m = ctx.stage_model(p, last, seed, &cfg);
    const auto ys = ctx.val_conditions(p, last);
    std::vector<std::vector<std::string>> out;
    for (int steps : grid) {
      if (steps > T || (diagonal_only && steps != T)) continue;
      const auto imgs = sample_stage(m, p.stage(last), ys, steps, seed + 2000);
      double err = 0;
      for (std::size_t i = 0; i < imgs.size(); ++i) err += mse(imgs[i], ctx.val_rgb()[i]);
      out.push_back({std::to_string(seed), std::to_string(T), std::to_string(steps),
                     num(toy_frechet(imgs, ctx.val_rgb())), num(err / static_cast<double>(imgs.size()))});
    }
    return out;
  });
  return detail::collect({"seed", "train_T", "sample_steps", "toy_frechet", "mse"}, rows);
}

/// Full pipeline with a truncation-trained detailed stage, swept over s.
inline Table sweep_truncation(AblationContext& ctx, const PipelineSpec& p, const AblationOptions& o) {
  const std::vector<int> grid = truncation_grid(p.stage(1).steps());
  auto rows = detail::run_cells(o.seeds.size(), o.jobs, [&](std::size_t c) {
    const std::uint64_t seed = o.seeds[c];
    std::vector<Denoiser<float>> models{ctx.stage_model(p, 1, seed)};
    TrainConfig cfg = ctx.train_config();
    cfg.truncation = true;
    for (int j = 2; j <= static_cast<int>(p.size()); ++j) models.push_back(ctx.stage_model(p, j, seed, &cfg));
    const Pipeline pl(p, models);
    std::vector<std::vector<std::string>> out;
    for (int s : grid) {
      SamplerConfig sc;
      sc.trunc_s = s;
      const PipelineSamples smp = sample_pipeline(pl, sc, o.samples, seed * 100000 + 3000);
      out.push_back({std::to_string(seed), std::to_string(s), num(toy_frechet(smp.finals, ctx.val_rgb()))});
    }
    return out;
  });
  return detail::collect({"seed", "s", "toy_frechet"}, rows);
}

/// Cutout/dropout grid for the condition of the later stages; full pipeline at s = 0.
inline Table sweep_augment(AblationContext& ctx, const PipelineSpec& p, const AblationOptions& o) {
  const std::vector<std::pair<Range, Range>> grid{
      {{0, 0}, {0, 0}}, {{0.2, 0.3}, {0, 0}}, {{0, 0}, {0.5, 0.7}}, {{0.2, 0.3}, {0.5, 0.7}}};
  const std::size_t cells = o.seeds.size() * grid.size();
  auto rows = detail::run_cells(cells, o.jobs, [&](std::size_t c) {
    const std::uint64_t seed = o.seeds[c / grid.size()];
    const auto& [cut, drop] = grid[c % grid.size()];
    TrainConfig cfg = ctx.train_config();
    cfg.cutout = cut;
    cfg.dropout = drop;
    cfg.truncation = false;
    std::vector<Denoiser<float>> models{ctx.stage_model(p, 1, seed)};
    for (int j = 2; j <= static_cast<int>(p.size()); ++j) models.push_back(ctx.stage_model(p, j, seed, &cfg));
    const Pipeline pl(p, models);
    const PipelineSamples smp = sample_pipeline(pl, SamplerConfig{}, o.samples, seed * 100000 + 4000);
    return std::vector<std::vector<std::string>>{{std::to_string(seed), num(cut.lo), num(cut.hi), num(drop.lo),
                                                  num(drop.hi), num(toy_frechet(smp.finals, ctx.val_rgb()))}};
  });
  return detail::collect({"seed", "cutout_lo", "cutout_hi", "dropout_lo", "dropout_hi", "toy_frechet"}, rows);
}

inline Table run_sweep(Sweep which, AblationContext& ctx, const PipelineSpec& p, const AblationOptions& o) {
  switch (which) {
    case Sweep::scheduler: return sweep_scheduler(ctx, p, o);
    case Sweep::steps: return sweep_steps(ctx, p, o, false);
    case Sweep::train_steps_grid: return sweep_steps(ctx, p, o, true);
    case Sweep::truncation: return sweep_truncation(ctx, p, o);
    case Sweep::augment: return sweep_augment(ctx, p, o);
  }
  throw Error(ErrorKind::config, "unknown sweep");
}

}  // namespace toddler
