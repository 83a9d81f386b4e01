#pragma once

// RunConfig: one JSON document for data location, pipeline, training and
// sampling. Unknown keys are rejected at every level.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "pipeline.hpp"

namespace toddler {

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  std::filesystem::path data_dir;  // empty = $TODDLER_DATA_DIR, then "data"
  std::filesystem::path out_dir = "runs/default";
  std::size_t data_limit = 0;      // 0 = every item
  PipelineSpec pipeline = PipelineSpec::two_stage();
  TrainConfig train;
  SamplerConfig sample;
  int sample_count = 1;

  std::filesystem::path resolved_data_dir() const {
    if (!data_dir.empty()) return data_dir;
    if (const char* env = std::getenv("TODDLER_DATA_DIR"); env && *env) return env;
    return "data";
  }
  std::filesystem::path checkpoint_path(int j) const { return out_dir / ("stage" + std::to_string(j) + ".ckpt"); }
  std::filesystem::path loss_csv_path(int j) const { return out_dir / ("stage" + std::to_string(j) + "_loss.csv"); }
  std::filesystem::path math_notes_path() const { return out_dir / "MATH_NOTES.md"; }

  void validate() const {
    train.validate();
    sample.validate(pipeline);
    require(sample_count >= 1, ErrorKind::config, "sample: count must be >= 1");
  }
};

inline Json to_json(const RunConfig& c) {
  Json s = to_json(c.sample);
  s["count"] = c.sample_count;
  Json j = {{"version", kRunConfigVersion},
            {"out_dir", c.out_dir.string()},
            {"data_limit", c.data_limit},
            {"pipeline", to_json(c.pipeline)},
            {"train", to_json(c.train)},
            {"sample", s}};
  if (!c.data_dir.empty()) j["data_dir"] = c.data_dir.string();
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  detail::check_keys(j, {"version", "data_dir", "out_dir", "data_limit", "pipeline", "train", "sample"}, "config");
  require(j.contains("version"), ErrorKind::config, "config: 'version' is required");
  require(j.at("version") == kRunConfigVersion, ErrorKind::config,
          "config: unsupported version " + j.at("version").dump());
  RunConfig c;
  c.data_dir = detail::get_or<std::string>(j, "data_dir", "", "config");
  c.out_dir = detail::get_or<std::string>(j, "out_dir", c.out_dir.string(), "config");
  c.data_limit = detail::get_or<std::size_t>(j, "data_limit", 0, "config");
  if (j.contains("pipeline")) c.pipeline = pipeline_spec_from_json(j.at("pipeline"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("sample")) {
    Json s = j.at("sample");
    c.sample_count = detail::get_or(s, "count", 1, "sample");
    s.erase("count");
    c.sample = sampler_config_from_json(s);
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::config, "config: cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(f);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::config, "config: " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace toddler
