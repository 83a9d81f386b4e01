#pragma once

// Staged training and cascaded sampling. Each stage is a bridge from its
// condition y to a degraded target; sampling draws all noise once per session
// so edits to an intermediate replay the rest of the cascade deterministically.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bridge.hpp"
#include "checkpoint.hpp"
#include "core.hpp"
#include "degrade.hpp"
#include "denoiser.hpp"
#include "image_io.hpp"
#include "schedule.hpp"
#include "toyworld.hpp"

namespace toddler {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), ErrorKind::config, where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    require(ok, ErrorKind::config, where + ": unknown key '" + key + "'");
  }
}

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw Error(ErrorKind::config, where + ": bad value for '" + key + "'");
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage and pipeline description
// ---------------------------------------------------------------------------

enum class YSource { black_image, previous_output, previous_overlay };

inline std::string to_string(YSource s) {
  switch (s) {
    case YSource::black_image: return "black-image";
    case YSource::previous_output: return "previous-output";
    case YSource::previous_overlay: return "previous-overlay";
  }
  return "?";
}

inline YSource parse_y_source(std::string_view s) {
  if (s == "black-image") return YSource::black_image;
  if (s == "previous-output") return YSource::previous_output;
  if (s == "previous-overlay") return YSource::previous_overlay;
  throw Error(ErrorKind::config, "unknown y-source '" + std::string(s) + "'");
}

/// Serialisable knobs of one stage; StageSpec derives schedule and plan from them.
struct StageConfig {
  StageKind kind = StageKind::sketch;
  ScheduleKind schedule = ScheduleKind::linear;
  int steps = 10;
  double peak_variance = 0.05;
  double bridge_factor = 1.0;
  double keep_min = 0.3;
  int max_kernel = 32;
  YSource y_source = YSource::black_image;
  Preset preset = Preset::small;

  bool operator==(const StageConfig&) const = default;

  /// Defaults per kind: small variance peak for the sketch stage, 1.0 elsewhere.
  static StageConfig defaults(StageKind kind, int steps = 10) {
    StageConfig c;
    c.kind = kind;
    c.steps = steps;
    c.peak_variance = kind == StageKind::sketch ? 0.05 : 1.0;
    c.y_source = kind == StageKind::sketch ? YSource::black_image : YSource::previous_output;
    return c;
  }
};

inline Json to_json(const StageConfig& c) {
  return {{"kind", to_string(c.kind)},           {"schedule", to_string(c.schedule)},
          {"steps", c.steps},                    {"peak_variance", c.peak_variance},
          {"bridge_factor", c.bridge_factor},    {"keep_min", c.keep_min},
          {"max_kernel", c.max_kernel},          {"y_source", to_string(c.y_source)},
          {"preset", to_string(c.preset)}};
}

inline StageConfig stage_config_from_json(const Json& j) {
  const std::string where = "stage";
  detail::check_keys(j, {"kind", "schedule", "steps", "peak_variance", "bridge_factor", "keep_min", "max_kernel",
                         "y_source", "preset"},
                     where);
  require(j.contains("kind"), ErrorKind::config, "stage: 'kind' is required");
  StageConfig c = StageConfig::defaults(parse_stage_kind(j.at("kind").get<std::string>()));
  c.schedule = parse_schedule_kind(detail::get_or<std::string>(j, "schedule", to_string(c.schedule), where));
  c.steps = detail::get_or(j, "steps", c.steps, where);
  c.peak_variance = detail::get_or(j, "peak_variance", c.peak_variance, where);
  c.bridge_factor = detail::get_or(j, "bridge_factor", c.bridge_factor, where);
  c.keep_min = detail::get_or(j, "keep_min", c.keep_min, where);
  c.max_kernel = detail::get_or(j, "max_kernel", c.max_kernel, where);
  c.y_source = parse_y_source(detail::get_or<std::string>(j, "y_source", to_string(c.y_source), where));
  c.preset = parse_preset(detail::get_or<std::string>(j, "preset", to_string(c.preset), where));
  return c;
}

struct StageSpec {
  int index = 1;  // 1-based
  StageConfig config;
  NoiseSchedule schedule;
  DegradationPlan plan;

  static StageSpec make(int index, const StageConfig& c, double edge_threshold = 0.1) {
    require(index >= 1, ErrorKind::config, "StageSpec: index must be >= 1");
    require(c.steps >= 1, ErrorKind::config, "StageSpec: T must be >= 1");
    require(is_bridge_family(c.schedule), ErrorKind::config,
            "StageSpec: pipeline stages need a bridge-family schedule (linear, log, bridge)");
    require(index != 1 || c.y_source == YSource::black_image, ErrorKind::config,
            "StageSpec: stage 1 must start from the black image");
    require(index == 1 || c.y_source != YSource::black_image, ErrorKind::config,
            "StageSpec: only stage 1 starts from the black image");
    StageSpec s;
    s.index = index;
    s.config = c;
    try {
      s.schedule = make_schedule(c.schedule, c.steps, c.peak_variance, c.bridge_factor);
      s.plan = DegradationPlan::make(c.kind, c.steps, c.keep_min, c.max_kernel, edge_threshold);
    } catch (const Error& e) {
      throw Error(ErrorKind::config, std::string("StageSpec: ") + e.what());
    }
    return s;
  }

  StageKind kind() const { return config.kind; }
  int steps() const { return config.steps; }
  int channels() const { return config.kind == StageKind::sketch ? 1 : 3; }
};

struct PipelineSpec {
  int canvas = 32;
  double edge_threshold = 0.1;
  std::vector<StageSpec> stages;

  std::size_t size() const { return stages.size(); }
  const StageSpec& stage(int j) const {
    require(j >= 1 && j <= static_cast<int>(stages.size()), ErrorKind::out_of_range,
            "pipeline: stage " + std::to_string(j) + " out of range 1.." + std::to_string(stages.size()));
    return stages[static_cast<std::size_t>(j - 1)];
  }
  Shape shape(int j) const { return {canvas, canvas, stage(j).channels()}; }

  /// Sketch -> [palette] -> detailed, with overlay only when a palette exists.
  static PipelineSpec make(std::vector<StageConfig> configs, int canvas = 32, double edge_threshold = 0.1) {
    require(configs.size() == 2 || configs.size() == 3, ErrorKind::config, "pipeline: 2 or 3 stages expected");
    require(canvas >= 8, ErrorKind::config, "pipeline: canvas must be >= 8");
    const bool three = configs.size() == 3;
    require(configs.front().kind == StageKind::sketch, ErrorKind::config, "pipeline: stage 1 must be the sketch stage");
    require(configs.back().kind == StageKind::detailed, ErrorKind::config,
            "pipeline: the last stage must be the detailed stage");
    require(!three || configs[1].kind == StageKind::palette, ErrorKind::config,
            "pipeline: the middle stage must be the palette stage");
    if (three)
      require(configs[1].y_source == YSource::previous_output, ErrorKind::config,
              "pipeline: the palette stage is conditioned on the sketch (previous-output)");
    require(three || configs.back().y_source == YSource::previous_output, ErrorKind::config,
            "pipeline: overlay needs a palette stage");
    PipelineSpec p;
    p.canvas = canvas;
    p.edge_threshold = edge_threshold;
    for (std::size_t i = 0; i < configs.size(); ++i)
      p.stages.push_back(StageSpec::make(static_cast<int>(i) + 1, configs[i], edge_threshold));
    return p;
  }

  /// The default two-stage benchmark: sketch -> RGB with T steps each.
  static PipelineSpec two_stage(int steps = 10, int canvas = 32) {
    return make({StageConfig::defaults(StageKind::sketch, steps), StageConfig::defaults(StageKind::detailed, steps)},
                canvas);
  }
};

inline Json to_json(const PipelineSpec& p) {
  Json stages = Json::array();
  for (const auto& s : p.stages) stages.push_back(to_json(s.config));
  return {{"canvas", p.canvas}, {"edge_threshold", p.edge_threshold}, {"stages", stages}};
}

inline PipelineSpec pipeline_spec_from_json(const Json& j) {
  detail::check_keys(j, {"canvas", "edge_threshold", "stages"}, "pipeline");
  require(j.contains("stages") && j.at("stages").is_array(), ErrorKind::config, "pipeline: 'stages' array required");
  std::vector<StageConfig> cs;
  for (const auto& s : j.at("stages")) cs.push_back(stage_config_from_json(s));
  return PipelineSpec::make(cs, detail::get_or(j, "canvas", 32, "pipeline"),
                            detail::get_or(j, "edge_threshold", 0.1, "pipeline"));
}

// ---------------------------------------------------------------------------
// Training / sampling configuration
// ---------------------------------------------------------------------------

struct Range {
  double lo = 0.0, hi = 0.0;
  bool operator==(const Range&) const = default;
};

struct TrainConfig {
  int epochs = 1;
  int batch_size = 16;
  double learning_rate = 2e-3;
  Range cutout{};   // fraction of the canvas blacked out
  Range dropout{};  // fraction of white pixels removed
  bool truncation = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorKind::config, "train: epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::config, "train: batch size must be >= 1");
    require(learning_rate > 0 && std::isfinite(learning_rate), ErrorKind::config, "train: learning rate must be > 0");
    for (const Range& r : {cutout, dropout})
      require(0.0 <= r.lo && r.lo <= r.hi && r.hi <= 1.0, ErrorKind::config,
              "train: augmentation ranges must satisfy 0 <= lo <= hi <= 1");
  }
};

inline Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"cutout", {c.cutout.lo, c.cutout.hi}},
          {"dropout", {c.dropout.lo, c.dropout.hi}},
          {"truncation", c.truncation},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  const std::string w = "train";
  detail::check_keys(j, {"epochs", "batch_size", "learning_rate", "cutout", "dropout", "truncation", "seed"}, w);
  TrainConfig c;
  c.epochs = detail::get_or(j, "epochs", c.epochs, w);
  c.batch_size = detail::get_or(j, "batch_size", c.batch_size, w);
  c.learning_rate = detail::get_or(j, "learning_rate", c.learning_rate, w);
  auto range = [&](const char* key, Range fallback) {
    const auto v = detail::get_or<std::vector<double>>(j, key, {fallback.lo, fallback.hi}, w);
    require(v.size() == 2, ErrorKind::config, w + ": '" + key + "' must be [lo, hi]");
    return Range{v[0], v[1]};
  };
  c.cutout = range("cutout", c.cutout);
  c.dropout = range("dropout", c.dropout);
  c.truncation = detail::get_or(j, "truncation", c.truncation, w);
  c.seed = detail::get_or(j, "seed", c.seed, w);
  c.validate();
  return c;
}

struct SamplerConfig {
  std::vector<int> steps;  // per stage; empty = trained T, one entry = all stages
  int trunc_s = 0;
  std::uint64_t seed = 0;
  CoefficientSource source = CoefficientSource::oracle_derived;
  bool paper_literal_noise = false;

  int steps_for(const StageSpec& s) const {
    if (steps.empty()) return s.steps();
    if (steps.size() == 1) return std::min(steps.front(), s.steps());
    require(static_cast<std::size_t>(s.index) <= steps.size(), ErrorKind::config,
            "sampler: no step count for stage " + std::to_string(s.index));
    return steps[static_cast<std::size_t>(s.index - 1)];
  }

  void validate(const PipelineSpec& p) const {
    require(steps.size() <= 1 || steps.size() == p.size(), ErrorKind::config,
            "sampler: give one step count or one per stage");
    for (const auto& s : p.stages) {
      const int n = steps_for(s);
      require(n >= 1 && n <= s.steps(), ErrorKind::config,
              "sampler: stage " + std::to_string(s.index) + " steps must be in [1, " + std::to_string(s.steps()) + "]");
    }
    require(trunc_s >= 0 && trunc_s <= p.stage(1).steps(), ErrorKind::config,
            "sampler: trunc_s must be in [0, T1=" + std::to_string(p.stage(1).steps()) + "]");
  }
};

inline Json to_json(const SamplerConfig& c) {
  return {{"steps", c.steps},
          {"trunc_s", c.trunc_s},
          {"seed", c.seed},
          {"coefficients", to_string(c.source)},
          {"paper_literal_noise", c.paper_literal_noise}};
}

inline SamplerConfig sampler_config_from_json(const Json& j) {
  const std::string w = "sample";
  detail::check_keys(j, {"steps", "trunc_s", "seed", "coefficients", "paper_literal_noise"}, w);
  SamplerConfig c;
  if (j.contains("steps")) {
    if (j.at("steps").is_number_integer())
      c.steps = {j.at("steps").get<int>()};
    else
      c.steps = detail::get_or<std::vector<int>>(j, "steps", {}, w);
  }
  c.trunc_s = detail::get_or(j, "trunc_s", c.trunc_s, w);
  c.seed = detail::get_or(j, "seed", c.seed, w);
  c.source = parse_coefficient_source(detail::get_or<std::string>(j, "coefficients", to_string(c.source), w));
  c.paper_literal_noise = detail::get_or(j, "paper_literal_noise", c.paper_literal_noise, w);
  return c;
}

// ---------------------------------------------------------------------------
// Conditions
// ---------------------------------------------------------------------------

/// Cutout then dropout on a binary sketch. Only ever turns white pixels black.
inline ImageGrid augment_condition(const ImageGrid& cond, const TrainConfig& cfg, SeededRng& rng) {
  require(is_binary(cond), ErrorKind::invalid_argument, "augment_condition: sketch must be binary");
  require(cond.channels() == 1, ErrorKind::shape_mismatch, "augment_condition: 1-channel sketch expected");
  const int H = cond.height(), W = cond.width();
  std::vector<double> v = cond.values();

  const double cut = cfg.cutout.hi > 0 ? rng.uniform(cfg.cutout.lo, cfg.cutout.hi) : 0.0;
  if (cut > 0) {
    const auto target = static_cast<std::size_t>(std::ceil(cut * H * W));
    std::vector<std::uint8_t> covered(static_cast<std::size_t>(H * W), 0);
    std::size_t n = 0;
    const int side_max = std::max(2, std::min(H, W) / 4);
    while (n < target) {
      const int rh = rng.uniform_int(2, side_max), rw = rng.uniform_int(2, side_max);
      const int y0 = rng.uniform_int(0, H - rh), x0 = rng.uniform_int(0, W - rw);
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) {
          auto& c = covered[static_cast<std::size_t>(y * W + x)];
          n += c == 0;
          c = 1;
          v[static_cast<std::size_t>(y * W + x)] = 0.0;
        }
    }
  }
  const double drop = cfg.dropout.hi > 0 ? rng.uniform(cfg.dropout.lo, cfg.dropout.hi) : 0.0;
  if (drop > 0)
    for (double& x : v)
      if (x == 1.0 && rng.bernoulli(drop)) x = 0.0;
  return ImageGrid(cond.shape(), std::move(v));
}

/// The sketch as stage 1 would see it at step s: forward_sample(cond, black, s).
inline ImageGrid truncate_condition(const ImageGrid& cond, int s, const StageSpec& stage1, SeededRng& rng) {
  require(stage1.kind() == StageKind::sketch, ErrorKind::invalid_argument, "truncate_condition: needs the sketch stage");
  require(s >= 0 && s <= stage1.steps(), ErrorKind::out_of_range,
          "truncate_condition: s must be in [0, " + std::to_string(stage1.steps()) + "]");
  require(cond.channels() == 1, ErrorKind::shape_mismatch, "truncate_condition: 1-channel sketch expected");
  if (s == 0) return cond;
  const ImageGrid black = ImageGrid::filled(cond.shape(), 0.0);
  return forward_sample(cond, black, s, stage1.schedule, StageKind::sketch, stage1.plan, rng);
}

/// Training mode: s ~ U{0..T1}.
inline ImageGrid truncate_condition(const ImageGrid& cond, const StageSpec& stage1, SeededRng& rng) {
  const int s = rng.uniform_int(0, stage1.steps());
  return truncate_condition(cond, s, stage1, rng);
}

/// y for stage j given the sketch handed to it and (for overlay / palette-fed
/// detail stages) the palette output.
inline ImageGrid stage_condition(const PipelineSpec& p, int j, const ImageGrid* sketch, const ImageGrid* palette) {
  const StageSpec& s = p.stage(j);
  const Shape shape = p.shape(j);
  if (s.config.y_source == YSource::black_image) return ImageGrid::filled(shape, 0.0);
  require(sketch != nullptr, ErrorKind::invalid_argument, "stage_condition: sketch required");
  if (s.kind() == StageKind::palette) return replicate_channels(*sketch, 3);
  const bool has_palette = p.size() == 3;
  if (s.config.y_source == YSource::previous_overlay) {
    require(palette != nullptr, ErrorKind::invalid_argument, "stage_condition: palette required for overlay");
    return overlay(sketch->as(GridRole::image), *palette);
  }
  if (has_palette) {
    require(palette != nullptr, ErrorKind::invalid_argument, "stage_condition: palette required");
    return *palette;
  }
  return replicate_channels(*sketch, 3);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainState {
  Denoiser<float> model;
  OptimState<float> optim;
  std::vector<double> loss_curve;  // mean loss per epoch, all epochs so far
  std::vector<double> step_losses;  // this run only
  int epochs_done = 0;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

namespace detail {

inline const ImageGrid& stage_target(StageKind k, const DatasetItem& item) {
  switch (k) {
    case StageKind::sketch: return item.sketch;
    case StageKind::palette: return item.palette;
    case StageKind::detailed: return item.rgb;
  }
  return item.rgb;
}

}  // namespace detail

/// One teacher-forced example for stage j.
inline TrainExample make_train_example(const PipelineSpec& p, int j, const DatasetItem& item, const TrainConfig& cfg,
                                       SeededRng& rng) {
  const StageSpec& s = p.stage(j);
  const int t = rng.uniform_int(1, s.steps());
  const ImageGrid& x0 = detail::stage_target(s.kind(), item);
  ImageGrid y;
  if (s.index == 1) {
    y = ImageGrid::filled(x0.shape(), 0.0);
  } else {
    ImageGrid sketch = augment_condition(item.sketch, cfg, rng);
    if (cfg.truncation && s.kind() == StageKind::detailed) sketch = truncate_condition(sketch, p.stage(1), rng);
    y = stage_condition(p, j, &sketch, &item.palette);
  }
  TrainExample e;
  e.target = tilde_x0(s.kind(), x0, t, s.plan, rng);
  const ImageGrid eps = gaussian_field(rng, x0.shape(), s.kind() == StageKind::sketch);
  e.x_t = forward_with_noise(e.target, y, t, s.schedule, eps);
  e.y = std::move(y);
  e.tau = static_cast<double>(t) / s.steps();
  return e;
}

inline TrainState init_train_state(const PipelineSpec& p, int j, const TrainConfig& cfg) {
  const StageSpec& s = p.stage(j);
  TrainState st;
  st.model = Denoiser<float>::init(s.config.preset, s.channels(), s.channels(), detail::mix64(cfg.seed + 0xB00));
  st.optim = OptimState<float>::for_params(st.model.params(), cfg.learning_rate);
  return st;
}

/// Runs cfg.epochs more epochs on `state`. Epoch e draws from stream e, so a
/// resumed run matches an uninterrupted one.
inline void train_epochs(TrainState& state, std::span<const DatasetItem* const> data, const PipelineSpec& p, int j,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(!data.empty(), ErrorKind::invalid_argument, "train_stage: empty dataset");
  state.optim.learning_rate = cfg.learning_rate;
  const SeededRng root(cfg.seed, 0x7A11ull + static_cast<std::uint64_t>(j));
  const std::size_t n = data.size();
  for (int e = 0; e < cfg.epochs; ++e) {
    const int epoch = state.epochs_done + 1;
    SeededRng rng = root.split(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<TrainExample> batch;
      for (std::size_t k = b; k < std::min(n, b + static_cast<std::size_t>(cfg.batch_size)); ++k)
        batch.push_back(make_train_example(p, j, *data[order[k]], cfg, rng));
      LossAndGrads<float> lg = state.model.loss_and_grads(batch);
      require(std::isfinite(lg.loss), ErrorKind::numeric, "train_stage: non-finite loss at epoch " + std::to_string(epoch));
      optim_step(state.model, state.optim, lg.grads);
      state.step_losses.push_back(lg.loss);
      total += lg.loss;
      ++batches;
    }
    state.loss_curve.push_back(total / static_cast<double>(batches));
    state.epochs_done = epoch;
    if (on_epoch) on_epoch(epoch, state.loss_curve.back());
  }
}

inline TrainState train_stage(std::span<const DatasetItem* const> data, const PipelineSpec& p, int j,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  TrainState st = init_train_state(p, j, cfg);
  train_epochs(st, data, p, j, cfg, on_epoch);
  return st;
}

inline std::vector<const DatasetItem*> split_items(const Dataset& d, Split s) { return d.subset(s); }

// ---------------------------------------------------------------------------
// Stage checkpoints: weights + optimizer + stage description
// ---------------------------------------------------------------------------

inline Checkpoint stage_checkpoint(const TrainState& st, const PipelineSpec& p, int j, const TrainConfig& cfg) {
  Checkpoint ck = st.model.to_checkpoint();
  ck.metadata["stage_index"] = j;
  ck.metadata["stage"] = to_json(p.stage(j).config);
  ck.metadata["pipeline"] = to_json(p);
  ck.metadata["train"] = to_json(cfg);
  ck.metadata["loss_curve"] = st.loss_curve;
  ck.metadata["epochs_done"] = st.epochs_done;
  ck.metadata["adam"] = {{"step", st.optim.step}, {"learning_rate", st.optim.learning_rate}};
  const auto& ps = st.model.params();
  for (std::size_t i = 0; i < ps.values.size(); ++i) {
    for (int which = 0; which < 2; ++which) {
      Tensor t;
      t.name = std::string(which == 0 ? "adam.m/" : "adam.v/") + ps.names[i];
      t.shape.assign(ps.shapes[i].begin(), ps.shapes[i].end());
      const auto& src = which == 0 ? st.optim.m[i] : st.optim.v[i];
      t.values.assign(src.begin(), src.end());
      ck.tensors.push_back(std::move(t));
    }
  }
  return ck;
}

inline TrainState train_state_from_checkpoint(const Checkpoint& ck) {
  TrainState st;
  st.model = Denoiser<float>::from_checkpoint(ck);
  st.optim = OptimState<float>::for_params(st.model.params());
  const auto& ps = st.model.params();
  for (std::size_t i = 0; i < ps.values.size(); ++i) {
    if (const Tensor* m = ck.find("adam.m/" + ps.names[i])) st.optim.m[i] = m->values;
    if (const Tensor* v = ck.find("adam.v/" + ps.names[i])) st.optim.v[i] = v->values;
  }
  if (ck.metadata.contains("adam")) {
    st.optim.step = ck.metadata["adam"].value("step", std::int64_t{0});
    st.optim.learning_rate = ck.metadata["adam"].value("learning_rate", 1e-3);
  }
  st.loss_curve = ck.metadata.value("loss_curve", std::vector<double>{});
  st.epochs_done = ck.metadata.value("epochs_done", 0);
  return st;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Descending visit times: an even-stride subset of 0..T with `steps`
/// transitions, plus `extra` (the truncation stop) when it is not on the grid.
inline std::vector<int> step_grid(int T, int steps, int extra = 0) {
  require(steps >= 1 && steps <= T, ErrorKind::config,
          "step_grid: steps must be in [1, " + std::to_string(T) + "]");
  require(extra >= 0 && extra <= T, ErrorKind::out_of_range, "step_grid: stop out of range");
  std::set<int, std::greater<>> ts;
  for (int k = 0; k <= steps; ++k)
    ts.insert(static_cast<int>(std::lround(static_cast<double>(k) * T / steps)));
  ts.insert(extra);
  return {ts.begin(), ts.end()};
}

/// Once-per-session noise for one stage: fields for t = 0..T (index by the
/// time a transition lands on; index T seeds x_T).
inline std::vector<ImageGrid> stage_noise(const StageSpec& s, Shape shape, std::uint64_t master_seed) {
  SeededRng rng = SeededRng(master_seed, 0x5E55ull).split(static_cast<std::uint64_t>(s.index));
  std::vector<ImageGrid> out;
  for (int t = 0; t <= s.steps(); ++t) out.push_back(gaussian_field(rng, shape, s.kind() == StageKind::sketch));
  return out;
}

struct RunStageOptions {
  int steps = 0;  // 0 = trained T
  int stop_at = 0;
  int capture_at = -1;  // also return the state at this grid time
  CoefficientSource source = CoefficientSource::oracle_derived;
  ForwardOptions forward{};
  std::vector<std::pair<int, ImageGrid>>* trajectory = nullptr;
};

struct RunStageResult {
  ImageGrid x;                         // state at stop_at (field)
  std::optional<ImageGrid> captured;   // state at capture_at
};

/// x_T = y + sqrt(sigma2_T) eps, then reverse steps down the grid to stop_at.
inline RunStageResult run_stage(const Denoiser<float>& model, const StageSpec& spec, const ImageGrid& y,
                                std::span<const ImageGrid> noise, const RunStageOptions& opt) {
  require(model.x_channels() == spec.channels() && model.y_channels() == spec.channels(), ErrorKind::config,
          "run_stage: checkpoint does not match stage " + std::to_string(spec.index));
  require(y.channels() == spec.channels(), ErrorKind::shape_mismatch, "run_stage: y has the wrong channel count");
  require(noise.size() == static_cast<std::size_t>(spec.steps()) + 1, ErrorKind::shape_mismatch,
          "run_stage: need T+1 noise fields");
  const int T = spec.steps();
  const int steps = opt.steps == 0 ? T : opt.steps;
  require(opt.stop_at >= 0 && opt.stop_at <= T, ErrorKind::out_of_range, "run_stage: stop_at out of range");
  const std::vector<int> grid = step_grid(T, steps, opt.capture_at >= 0 ? opt.capture_at : opt.stop_at);
  require(opt.stop_at == 0 || std::find(grid.begin(), grid.end(), opt.stop_at) != grid.end(), ErrorKind::config,
          "run_stage: stop_at must lie on the step grid");

  RunStageResult r;
  ImageGrid x = forward_with_noise(y, y, T, spec.schedule, noise[static_cast<std::size_t>(T)], opt.forward);
  auto visit = [&](int t) {
    if (opt.trajectory) opt.trajectory->emplace_back(t, x);
    if (t == opt.capture_at) r.captured = x;
  };
  visit(T);
  for (std::size_t k = 0; k + 1 < grid.size() && grid[k] > opt.stop_at; ++k) {
    const int t = grid[k], u = grid[k + 1];
    ImageGrid x0_hat = model.forward(x, y, static_cast<double>(t) / T).as(GridRole::image);
    x = reverse_step(x, x0_hat, y, t, spec.schedule, noise[static_cast<std::size_t>(u)], opt.source, u);
    visit(u);
  }
  r.x = std::move(x);
  return r;
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

struct StageOutput {
  ImageGrid image;    // 8-bit quantised; binary for the sketch stage
  ImageGrid handoff;  // what the next stage consumes (x_s for a truncated sketch)
  bool operator==(const StageOutput&) const = default;
};

struct EditRecord {
  int stage = 0;
  ImageGrid image;
  std::string timestamp;
};

struct SessionState {
  std::string id;
  PipelineSpec spec;
  SamplerConfig sampler;
  std::vector<std::vector<ImageGrid>> noise;  // per stage, immutable
  std::vector<StageOutput> x_inter;
  std::vector<EditRecord> edits;

  int completed() const { return static_cast<int>(x_inter.size()); }
  bool done() const { return x_inter.size() == spec.size(); }
};

inline ImageGrid quantize8(const ImageGrid& g) {
  std::vector<double> v(g.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = to_byte(g.values()[i]) / 255.0;
  return ImageGrid(g.shape(), std::move(v));
}

/// A pipeline bound to trained weights; sessions carry everything else.
class Pipeline {
 public:
  Pipeline(PipelineSpec spec, std::vector<Denoiser<float>> models) : spec_(std::move(spec)), models_(std::move(models)) {
    require(models_.size() == spec_.size(), ErrorKind::config,
            "pipeline: " + std::to_string(spec_.size()) + " stages but " + std::to_string(models_.size()) +
                " checkpoints");
    for (const auto& s : spec_.stages) {
      const auto& m = models_[static_cast<std::size_t>(s.index - 1)];
      require(m.x_channels() == s.channels() && m.y_channels() == s.channels(), ErrorKind::config,
              "pipeline: checkpoint does not match stage " + std::to_string(s.index));
    }
  }

  /// Rebuilds the pipeline from per-stage checkpoints; each must describe the
  /// stage it is loaded into.
  static Pipeline from_checkpoints(const PipelineSpec& spec, std::span<const Checkpoint> cks) {
    require(cks.size() == spec.size(), ErrorKind::config,
            "pipeline: " + std::to_string(spec.size()) + " stages but " + std::to_string(cks.size()) + " checkpoints");
    std::vector<Denoiser<float>> models;
    for (std::size_t i = 0; i < cks.size(); ++i) {
      const auto& md = cks[i].metadata;
      require(md.contains("stage"), ErrorKind::config, "pipeline: checkpoint has no stage description");
      require(stage_config_from_json(md["stage"]) == spec.stages[i].config, ErrorKind::config,
              "pipeline: checkpoint " + std::to_string(i + 1) + " was trained for a different stage");
      models.push_back(Denoiser<float>::from_checkpoint(cks[i]));
    }
    return Pipeline(spec, std::move(models));
  }

  const PipelineSpec& spec() const { return spec_; }
  const Denoiser<float>& model(int j) const { return models_.at(static_cast<std::size_t>(j - 1)); }

  /// Samples every stage's noise up front; nothing is run yet.
  SessionState open(const SamplerConfig& cfg, std::string id = {}) const {
    cfg.validate(spec_);
    SessionState s;
    s.id = std::move(id);
    s.spec = spec_;
    s.sampler = cfg;
    for (const auto& st : spec_.stages) s.noise.push_back(stage_noise(st, spec_.shape(st.index), cfg.seed));
    return s;
  }

  /// Runs stage j. Already-computed stages are left alone; skipping ahead is an error.
  /// `trajectory` (optional) receives the state at every visited time.
  void run(SessionState& s, int j, std::vector<std::pair<int, ImageGrid>>* trajectory = nullptr) const {
    spec_.stage(j);
    if (j <= s.completed()) return;
    require(j == s.completed() + 1, ErrorKind::order,
            "stage " + std::to_string(j) + " requires stage " + std::to_string(s.completed() + 1) + " first");
    const StageSpec& st = spec_.stage(j);
    const ImageGrid* sketch = j > 1 ? &s.x_inter[0].handoff : nullptr;
    const ImageGrid* palette = (spec_.size() == 3 && j > 2) ? &s.x_inter[1].image : nullptr;
    const ImageGrid y = stage_condition(spec_, j, sketch, palette);
    RunStageOptions opt;
    opt.steps = s.sampler.steps_for(st);
    opt.source = s.sampler.source;
    opt.forward.paper_literal_noise = s.sampler.paper_literal_noise;
    const int trunc = j == 1 ? s.sampler.trunc_s : 0;
    opt.capture_at = trunc;
    opt.trajectory = trajectory;
    RunStageResult r = run_stage(model(j), st, y, s.noise[static_cast<std::size_t>(j - 1)], opt);
    StageOutput out;
    if (st.kind() == StageKind::sketch) {
      out.image = binarize(r.x);
      out.handoff = trunc == 0 ? out.image : *r.captured;
    } else {
      out.image = quantize8(r.x);
      out.handoff = out.image;
    }
    s.x_inter.push_back(std::move(out));
  }

  void run_all(SessionState& s) const {
    for (int j = s.completed() + 1; j <= static_cast<int>(spec_.size()); ++j) run(s, j);
  }

  /// Replaces stage j's output and drops everything downstream. An edit equal
  /// to the current image keeps the stored handoff, so an unedited round trip
  /// is the identity.
  void set_output(SessionState& s, int j, const ImageGrid& edited) const {
    spec_.stage(j);
    require(j <= s.completed(), ErrorKind::order, "edit: stage " + std::to_string(j) + " has no output yet");
    require(edited.shape() == spec_.shape(j), ErrorKind::shape_mismatch,
            "edit: expected shape " + to_string(spec_.shape(j)) + ", got " + to_string(edited.shape()));
    const ImageGrid img = spec_.stage(j).kind() == StageKind::sketch ? edited.as(GridRole::image) : quantize8(edited);
    if (spec_.stage(j).kind() == StageKind::sketch)
      require(is_binary(img), ErrorKind::invalid_argument, "edit: sketch edits must be binary");
    StageOutput& cur = s.x_inter[static_cast<std::size_t>(j - 1)];
    if (!(img == cur.image)) cur = {img, img};
    s.x_inter.resize(static_cast<std::size_t>(j));
    s.edits.push_back({j, img, detail::utc_timestamp()});
  }

  void resume_from_edit(SessionState& s, int j, const ImageGrid& edited) const {
    set_output(s, j, edited);
    run_all(s);
  }

 private:
  PipelineSpec spec_;
  std::vector<Denoiser<float>> models_;
};

inline SessionState run_pipeline(const Pipeline& p, const SamplerConfig& cfg, std::string id = {}) {
  SessionState s = p.open(cfg, std::move(id));
  p.run_all(s);
  return s;
}

/// Replays a session's edit log into a fresh session with the same config.
inline SessionState replay_session(const Pipeline& p, const SessionState& original) {
  SessionState s = p.open(original.sampler, original.id);
  for (const auto& e : original.edits) {
    for (int j = s.completed() + 1; j <= e.stage; ++j) p.run(s, j);
    p.set_output(s, e.stage, e.image);
  }
  p.run_all(s);
  return s;
}

// ---------------------------------------------------------------------------
// Session persistence: manifest.json + raw doubles for noise and handoffs + PNGs
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::uint8_t> grids_to_bytes(std::span<const ImageGrid> grids) {
  std::vector<std::uint8_t> out;
  for (const auto& g : grids) {
    const std::size_t off = out.size();
    out.resize(off + g.size() * sizeof(double));
    std::memcpy(out.data() + off, g.values().data(), g.size() * sizeof(double));
  }
  return out;
}

inline std::vector<ImageGrid> grids_from_bytes(const std::vector<std::uint8_t>& bytes, Shape shape,
                                               std::size_t count, GridRole role) {
  require(bytes.size() == count * shape.size() * sizeof(double), ErrorKind::io, "session: raw field has wrong size");
  std::vector<ImageGrid> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> v(shape.size());
    std::memcpy(v.data(), bytes.data() + k * shape.size() * sizeof(double), shape.size() * sizeof(double));
    out.emplace_back(shape, std::move(v), role);
  }
  return out;
}

}  // namespace detail

inline void save_session(const SessionState& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "noise");
  fs::create_directories(dir / "outputs");
  fs::create_directories(dir / "edits");
  Json edits = Json::array();
  for (std::size_t k = 0; k < s.edits.size(); ++k) {
    const std::string name = "edits/" + std::to_string(k) + ".png";
    write_png(dir / name, s.edits[k].image);
    edits.push_back({{"stage", s.edits[k].stage}, {"image", name}, {"timestamp", s.edits[k].timestamp}});
  }
  Json outputs = Json::array();
  for (std::size_t j = 0; j < s.x_inter.size(); ++j) {
    const std::string stem = "outputs/stage" + std::to_string(j + 1);
    write_png(dir / (stem + ".png"), s.x_inter[j].image);
    const std::array<ImageGrid, 1> h{s.x_inter[j].handoff};
    detail::write_file(dir / (stem + ".handoff.bin"), detail::grids_to_bytes(h));
    outputs.push_back({{"png", stem + ".png"}, {"handoff", stem + ".handoff.bin"},
                       {"handoff_role", s.x_inter[j].handoff.role() == GridRole::field ? "field" : "image"}});
  }
  for (std::size_t j = 0; j < s.noise.size(); ++j)
    detail::write_file(dir / ("noise/stage" + std::to_string(j + 1) + ".bin"), detail::grids_to_bytes(s.noise[j]));
  const Json manifest = {{"format", "toddler-session"}, {"version", 1},         {"id", s.id},
                         {"pipeline", to_json(s.spec)}, {"sampler", to_json(s.sampler)}, {"outputs", outputs},
                         {"edits", edits}};
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << "\n";
  require(static_cast<bool>(f), ErrorKind::io, "session: cannot write " + (dir / "manifest.json").string());
}

inline SessionState load_session(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  require(static_cast<bool>(f), ErrorKind::io, "session: no manifest in " + dir.string());
  Json m;
  try {
    m = Json::parse(f);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, std::string("session: bad manifest: ") + e.what());
  }
  SessionState s;
  s.id = m.at("id").get<std::string>();
  s.spec = pipeline_spec_from_json(m.at("pipeline"));
  s.sampler = sampler_config_from_json(m.at("sampler"));
  for (const auto& st : s.spec.stages)
    s.noise.push_back(detail::grids_from_bytes(
        detail::read_file(dir / ("noise/stage" + std::to_string(st.index) + ".bin")), s.spec.shape(st.index),
        static_cast<std::size_t>(st.steps()) + 1, GridRole::field));
  int j = 0;
  for (const auto& o : m.at("outputs")) {
    ++j;
    StageOutput out;
    out.image = read_png(dir / o.at("png").get<std::string>());
    if (s.spec.stage(j).channels() == 1 && out.image.channels() != 1) out.image = luminance(out.image);
    const GridRole role = o.at("handoff_role").get<std::string>() == "field" ? GridRole::field : GridRole::image;
    out.handoff = detail::grids_from_bytes(detail::read_file(dir / o.at("handoff").get<std::string>()),
                                           s.spec.shape(j), 1, role)
                      .front();
    s.x_inter.push_back(std::move(out));
  }
  for (const auto& e : m.at("edits")) {
    ImageGrid img = read_png(dir / e.at("image").get<std::string>());
    const int stage = e.at("stage").get<int>();
    if (s.spec.stage(stage).channels() == 1 && img.channels() != 1) img = luminance(img);
    s.edits.push_back({stage, std::move(img), e.at("timestamp").get<std::string>()});
  }
  return s;
}

}  // namespace toddler
