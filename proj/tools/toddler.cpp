// toddler: dataset generation, per-stage training, sampling, sweeps,
// evaluation and the session server.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "toddler/ablation.hpp"
#include "toddler/config.hpp"
#include "toddler/evaluate.hpp"
#include "toddler/math_notes.hpp"
#include "toddler/service.hpp"

using namespace toddler;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

// Flags shared by the config-driven commands. Unset optionals leave the config alone.
struct Overrides {
  std::string config;
  std::string data_dir, out_dir;
  std::optional<std::size_t> data_limit;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> train_seed;

  void add_to(CLI::App* c, bool train_flags) {
    c->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--data-dir", data_dir, "Dataset root (default: config, then $TODDLER_DATA_DIR, then ./data)");
    c->add_option("--out-dir", out_dir, "Checkpoint/output root (default: config out_dir)");
    c->add_option("--data-limit", data_limit, "Use only the first N dataset items");
    if (train_flags) {
      c->add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber);
      c->add_option("--batch-size", batch_size, "Batch size")->check(CLI::PositiveNumber);
      c->add_option("--lr", lr, "Adam learning rate");
      c->add_option("--train-seed", train_seed, "Training seed");
    }
  }

  RunConfig load() const {
    RunConfig c = load_run_config(config);
    if (!data_dir.empty()) c.data_dir = data_dir;
    if (!out_dir.empty()) c.out_dir = out_dir;
    if (data_limit) c.data_limit = *data_limit;
    if (epochs) c.train.epochs = *epochs;
    if (batch_size) c.train.batch_size = *batch_size;
    if (lr) c.train.learning_rate = *lr;
    if (train_seed) c.train.seed = *train_seed;
    c.validate();
    return c;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
  f << text;
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
}

std::vector<NoiseSchedule> stage_schedules(const PipelineSpec& p) {
  std::vector<NoiseSchedule> out;
  for (const auto& s : p.stages) out.push_back(s.schedule);
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(std::size_t n, std::uint64_t seed, const std::string& out, int canvas) {
  ToyworldOptions o;
  o.canvas = canvas;
  const Json m = gen_dataset(n, seed, out, o);
  std::cout << "wrote " << m.at("items").size() << " scenes to " << out << "\n";
  return kOk;
}

int cmd_train(const Overrides& ov, int stage, bool resume) {
  const RunConfig c = ov.load();
  require(stage >= 1 && stage <= static_cast<int>(c.pipeline.size()), ErrorKind::config,
          "--stage must be in [1, " + std::to_string(c.pipeline.size()) + "], got " + std::to_string(stage));
  const Dataset data = load_dataset(c.resolved_data_dir(), c.data_limit);
  const auto train = data.subset(Split::train);
  const fs::path ck_path = c.checkpoint_path(stage);

  TrainState st;
  if (resume) {
    require(fs::exists(ck_path), ErrorKind::config, "--resume: no checkpoint at " + ck_path.string());
    const Checkpoint ck = load_checkpoint(ck_path);
    require(ck.metadata.contains("stage") && stage_config_from_json(ck.metadata["stage"]) == c.pipeline.stage(stage).config,
            ErrorKind::config, "--resume: checkpoint was trained for a different stage config");
    st = train_state_from_checkpoint(ck);
  } else {
    st = init_train_state(c.pipeline, stage, c.train);
  }
  std::cerr << "stage " << stage << " (" << to_string(c.pipeline.stage(stage).kind()) << "): " << train.size()
            << " training scenes, " << c.train.epochs << " epochs from epoch " << st.epochs_done << "\n";
  train_epochs(st, train, c.pipeline, stage, c.train, [](int e, double loss) {
    std::cerr << "  epoch " << e << "  loss " << loss << "\n";
  });

  fs::create_directories(c.out_dir);
  save_checkpoint(ck_path, stage_checkpoint(st, c.pipeline, stage, c.train));
  std::ostringstream csv;
  csv << "epoch,loss\n";
  for (std::size_t i = 0; i < st.loss_curve.size(); ++i) csv << (i + 1) << "," << num(st.loss_curve[i]) << "\n";
  write_text(c.loss_csv_path(stage), csv.str());
  write_text(c.math_notes_path(), math_notes(stage_schedules(c.pipeline)));
  std::cout << "wrote " << ck_path.string() << "\n";
  return kOk;
}

Pipeline load_pipeline(const RunConfig& c) {
  std::vector<Checkpoint> cks;
  for (const auto& s : c.pipeline.stages) {
    const fs::path p = c.checkpoint_path(s.index);
    require(fs::exists(p), ErrorKind::config, "missing checkpoint " + p.string() + " (run `train` first)");
    cks.push_back(load_checkpoint(p));
  }
  return Pipeline::from_checkpoints(c.pipeline, cks);
}

struct SampleFlags {
  std::optional<std::uint64_t> seed;
  std::optional<int> steps, trunc_s, count;
  std::string coefficients, out;
  bool trajectory = false;
};

int cmd_sample(const Overrides& ov, const SampleFlags& f) {
  RunConfig c = ov.load();
  if (f.seed) c.sample.seed = *f.seed;
  if (f.steps) c.sample.steps = {*f.steps};
  if (f.trunc_s) c.sample.trunc_s = *f.trunc_s;
  if (f.count) c.sample_count = *f.count;
  if (!f.coefficients.empty()) c.sample.source = parse_coefficient_source(f.coefficients);
  c.validate();
  const Pipeline p = load_pipeline(c);
  const fs::path out = f.out;
  Json samples = Json::array();
  for (int k = 0; k < c.sample_count; ++k) {
    SamplerConfig sc = c.sample;
    sc.seed = c.sample.seed + static_cast<std::uint64_t>(k);
    SessionState s = p.open(sc);
    const std::string name = item_name(static_cast<std::size_t>(k), static_cast<std::size_t>(c.sample_count));
    Json files = Json::array();
    for (int j = 1; j <= static_cast<int>(p.spec().size()); ++j) {
      std::vector<std::pair<int, ImageGrid>> traj;
      p.run(s, j, f.trajectory ? &traj : nullptr);
      const fs::path rel = fs::path("stage" + std::to_string(j)) / (name + ".png");
      fs::create_directories(out / rel.parent_path());
      write_png(out / rel, s.x_inter.back().image);
      files.push_back(rel.string());
      for (const auto& [t, x] : traj) {
        const fs::path tp = out / "trajectory" / name / ("stage" + std::to_string(j) + "_t" + std::to_string(t) + ".png");
        fs::create_directories(tp.parent_path());
        write_png(tp, x.as(GridRole::image));
      }
    }
    samples.push_back({{"index", k}, {"seed", sc.seed}, {"stages", files}});
  }
  Json manifest = {{"pipeline", to_json(c.pipeline)}, {"sample", to_json(c.sample)}, {"count", c.sample_count},
                   {"samples", samples}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << c.sample_count << " samples to " << out.string() << "\n";
  return kOk;
}

struct AblateFlags {
  std::string which, out;
  std::vector<std::uint64_t> seeds{1};
  std::size_t samples = 100;
  std::vector<int> grid;
  int jobs = 1;
};

int cmd_ablate(const Overrides& ov, const AblateFlags& f) {
  const RunConfig c = ov.load();
  const Sweep which = parse_sweep(f.which);
  const Dataset data = load_dataset(c.resolved_data_dir(), c.data_limit);
  AblationContext ctx(data, c.train);
  ctx.log = &std::cerr;
  AblationOptions o;
  o.seeds = f.seeds;
  o.samples = f.samples;
  o.grid = f.grid;
  o.jobs = f.jobs;
  const Table t = run_sweep(which, ctx, c.pipeline, o);
  const fs::path out = f.out.empty() ? c.out_dir / ("ablate_" + f.which + ".csv") : fs::path(f.out);
  write_text(out, t.csv());
  std::cout << t.csv();
  return kOk;
}

int cmd_eval(const std::string& pred, const std::string& ref, const std::string& out, double edge) {
  require(fs::is_directory(pred), ErrorKind::config, "--pred-dir: not a directory: " + pred);
  require(fs::is_directory(ref), ErrorKind::config, "--ref-dir: not a directory: " + ref);
  const Json rep = evaluate_dirs(pred, ref, edge);
  if (!out.empty()) write_text(out, rep.dump(2) + "\n");
  std::cout << rep.dump(2) << "\n";
  return kOk;
}

SessionServer* g_server = nullptr;

int cmd_serve(const Overrides& ov, const std::string& host, int port, const std::string& sessions, std::size_t resident) {
  const RunConfig c = ov.load();
  ServiceOptions o;
  o.session_dir = sessions;
  o.checkpoint_dir = c.out_dir;
  o.default_pipeline = c.pipeline;
  o.max_resident = resident;
  SessionServer server(o);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::cerr << "listening on http://" << host << ":" << port << " (sessions in " << sessions << ")\n";
  const bool ok = server.listen(host, port);
  g_server = nullptr;
  require(ok, ErrorKind::io, "could not listen on " + host + ":" + std::to_string(port));
  return kOk;
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::invalid_argument:
    case ErrorKind::out_of_range:
    case ErrorKind::order: return kUsage;
    default: return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toddler: staged bridge diffusion on toy scenes"};
  app.require_subcommand(1);

  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string out;
  int canvas = 32;
  auto* gen = app.add_subcommand("gen-data", "Generate a toyworld dataset");
  gen->add_option("--n", n, "Number of scenes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--canvas", canvas, "Canvas side")->check(CLI::Range(8, 256));

  Overrides tr_ov;
  int stage = 0;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train one stage");
  tr_ov.add_to(train, true);
  train->add_option("--stage", stage, "Stage index (1-based)")->required();
  train->add_flag("--resume", resume, "Continue from the existing checkpoint for --epochs more epochs");

  Overrides sa_ov;
  SampleFlags sf;
  auto* sample = app.add_subcommand("sample", "Sample the full pipeline");
  sa_ov.add_to(sample, false);
  sample->add_option("--seed", sf.seed, "Sampler seed (sample k uses seed + k)");
  sample->add_option("--steps", sf.steps, "Sampling steps per stage (capped at each stage's T)")->check(CLI::PositiveNumber);
  sample->add_option("--trunc-s", sf.trunc_s, "Stage-1 truncation step handed to stage 2");
  sample->add_option("--count", sf.count, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--coefficients", sf.coefficients, "Posterior coefficients")
      ->check(CLI::IsMember({"oracle-derived", "paper-literal"}));
  sample->add_flag("--trajectory", sf.trajectory, "Also write the state at every visited step");
  sample->add_option("--out", sf.out, "Output directory")->required();

  Overrides ab_ov;
  AblateFlags af;
  auto* ablate = app.add_subcommand("ablate", "Run a sweep and write a tidy CSV");
  ab_ov.add_to(ablate, true);
  ablate->add_option("--which", af.which, "Sweep")
      ->required()
      ->check(CLI::IsMember({"scheduler", "steps", "train-steps-grid", "truncation", "augment"}));
  ablate->add_option("--seeds", af.seeds, "Seeds (one cell per seed)");
  ablate->add_option("--samples", af.samples, "Generated images per cell")->check(CLI::Range(32, 100000));
  ablate->add_option("--grid", af.grid, "Step grid for steps sweeps");
  ablate->add_option("--jobs", af.jobs, "Cells in flight")->check(CLI::PositiveNumber);
  ablate->add_option("--out", af.out, "CSV path (default: <out_dir>/ablate_<which>.csv)");

  std::string pred, ref, report;
  double edge = 0.1;
  auto* eval = app.add_subcommand("eval", "Compare a folder of predictions with a folder of references");
  eval->add_option("--pred-dir", pred, "Predicted PNGs")->required();
  eval->add_option("--ref-dir", ref, "Reference PNGs")->required();
  eval->add_option("--out", report, "Also write the report here");
  eval->add_option("--edge-threshold", edge, "Edge threshold for RGB contours");

  Overrides sv_ov;
  std::string host = "127.0.0.1", sessions = "sessions";
  int port = 8080;
  std::size_t resident = 64;
  auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
  sv_ov.add_to(serve, false);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--sessions", sessions, "Session directory");
  serve->add_option("--max-sessions", resident, "Sessions kept in memory")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(n, seed, out, canvas);
    if (*train) return cmd_train(tr_ov, stage, resume);
    if (*sample) return cmd_sample(sa_ov, sf);
    if (*ablate) return cmd_ablate(ab_ov, af);
    if (*eval) return cmd_eval(pred, ref, report, edge);
    if (*serve) return cmd_serve(sv_ov, host, port, sessions, resident);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
