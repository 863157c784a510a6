#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "metafe/pipeline.hpp"

using namespace metafe;
using pipeline::RunConfig;
namespace fs = std::filesystem;

namespace {

// Flags that override RunConfig fields; unset flags leave the config file's values alone.
struct Overrides {
  std::string config_file;
  std::optional<std::string> dataset, run_dir, init_mode;
  std::optional<int> width, height, batch_size, workers, timesteps, sampling_steps, cka_samples;
  std::optional<double> lr, gamma;
  std::optional<uint64_t> seed;
  std::optional<bool> cn;
  std::optional<bool> freeze_phase1;
  std::array<std::optional<int>, 4> epochs, steps;
  std::array<std::optional<double>, 4> stage_lr;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_file, "JSON run configuration");
    app->add_option("--dataset", dataset, "dataset directory");
    app->add_option("--run-dir", run_dir, "output directory for checkpoints, logs and reports");
    app->add_option("--width", width);
    app->add_option("--height", height);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--seed", seed);
    app->add_option("--workers", workers, "intra-op threads");
    app->add_option("--init-mode", init_mode, "depth decoder initialisation: wp, scratch or fw");
    app->add_option("--cn", cn, "cross normalization on/off (true/false)");
    app->add_option("--freeze-phase1", freeze_phase1, "keep the diffusion stage frozen during depth training");
    app->add_option("--gamma", gamma, "cross-normalization scale");
    app->add_option("--diffusion-timesteps", timesteps);
    app->add_option("--sampling-steps", sampling_steps);
    app->add_option("--cka-samples", cka_samples);
    for (auto s : pipeline::kStages) {
      const std::string name(pipeline::to_string(s));
      app->add_option("--epochs-" + name, epochs[static_cast<size_t>(s)]);
      app->add_option("--steps-" + name, steps[static_cast<size_t>(s)], "exact step count, overrides epochs");
      app->add_option("--lr-" + name, stage_lr[static_cast<size_t>(s)], "learning rate for this stage only");
    }
  }

  RunConfig build() const {
    RunConfig c = config_file.empty() ? RunConfig{} : RunConfig::load(config_file);
    if (dataset) c.dataset = *dataset;
    if (run_dir) c.run_dir = *run_dir;
    if (init_mode) c.init_mode = pipeline::init_mode_from_string(*init_mode);
    if (width) c.width = *width;
    if (height) c.height = *height;
    if (batch_size) c.batch_size = *batch_size;
    if (workers) c.workers = *workers;
    if (timesteps) c.diffusion_timesteps = *timesteps;
    if (sampling_steps) c.sampling_steps = *sampling_steps;
    if (cka_samples) c.cka_samples = *cka_samples;
    if (lr) c.learning_rate = *lr;
    if (gamma) c.cross_norm.gamma = *gamma;
    if (seed) c.seed = *seed;
    if (cn) c.cn_enabled = *cn;
    if (freeze_phase1) c.freeze_phase1 = *freeze_phase1;
    for (auto s : pipeline::kStages) {
      if (epochs[static_cast<size_t>(s)]) c.schedule(s).epochs = *epochs[static_cast<size_t>(s)];
      if (steps[static_cast<size_t>(s)]) c.schedule(s).steps = *steps[static_cast<size_t>(s)];
      if (stage_lr[static_cast<size_t>(s)]) c.schedule(s).learning_rate = *stage_lr[static_cast<size_t>(s)];
    }
    c.validate();
    at::set_num_threads(c.workers);
    return c;
  }
};

void print_report(const std::string& label, const evalmetrics::MetricReport& r) {
  std::cout << label << "  abs_rel " << r.abs_rel << "  sq_rel " << r.sq_rel << "  rmse " << r.rmse << "  rmse_log "
            << r.rmse_log << "  delta " << r.delta << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-feature depth estimation: data generation, training, evaluation and analysis"};
  app.require_subcommand(1);
  Overrides ov;

  auto* gen = app.add_subcommand("generate-data", "render a synthetic endoscopic dataset");
  std::string gen_out = "data";
  std::optional<int> gen_sequences, gen_frames;
  std::optional<uint64_t> gen_seed;
  std::optional<double> gain_jitter;
  gen->add_option("-o,--out", gen_out, "output directory")->capture_default_str();
  gen->add_option("--sequences", gen_sequences);
  gen->add_option("--frames", gen_frames, "frames per sequence");
  gen->add_option("--gain-jitter", gain_jitter, "per-frame gain drawn from [1-j, 1+j]");
  gen->add_option("--data-seed", gen_seed);
  ov.attach(gen);

  std::vector<std::pair<CLI::App*, std::optional<pipeline::Stage>>> train_cmds;
  for (auto s : pipeline::kStages) {
    auto* cmd = app.add_subcommand("train-" + std::string(pipeline::to_string(s)), "train one stage");
    ov.attach(cmd);
    train_cmds.emplace_back(cmd, s);
  }
  auto* all = app.add_subcommand("train-all", "train the four stages in order");
  ov.attach(all);
  train_cmds.emplace_back(all, std::nullopt);

  std::string checkpoint, report_dir, split_name = "test", out_dir;
  auto* eval = app.add_subcommand("eval", "evaluate a depth checkpoint");
  ov.attach(eval);
  eval->add_option("--checkpoint", checkpoint, "depth checkpoint directory (default: <run-dir>/checkpoints/depth)");
  eval->add_option("--split", split_name, "train, val or test")->capture_default_str();
  eval->add_option("--report-dir", report_dir, "CSV output directory (default: <run-dir>/eval)");

  auto* abl = app.add_subcommand("ablate", "run the four WP x CN cells");
  ov.attach(abl);

  auto* cka = app.add_subcommand("analyze-cka", "CKA grids between RGB and depth decoder layers");
  ov.attach(cka);
  cka->add_option("--checkpoint", checkpoint, "depth checkpoint directory (default: <run-dir>/checkpoints/depth)");
  cka->add_option("-o,--out", out_dir, "output directory (default: <run-dir>/cka)");

  auto* show = app.add_subcommand("show-config", "print the effective configuration as JSON");
  ov.attach(show);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      RunConfig c = ov.build();
      auto plan = c.datagen;
      plan.scene.width = c.width;
      plan.scene.height = c.height;
      if (gen_sequences) plan.sequences = *gen_sequences;
      if (gen_frames) plan.scene.frame_count = *gen_frames;
      if (gen_seed) plan.seed = *gen_seed;
      if (gain_jitter) plan.scene.brightness = {1.0 - *gain_jitter, 1.0 + *gain_jitter, 0.0, 0.0};
      pipeline::generate_dataset(plan, gen_out, &std::cerr);
      return 0;
    }
    for (auto& [cmd, stage] : train_cmds) {
      if (!cmd->parsed()) continue;
      RunConfig c = ov.build();
      std::vector<pipeline::StageResult> results;
      if (stage) {
        results.push_back(pipeline::train_stage(*stage, c));
      } else {
        results = pipeline::train_all(c);
      }
      for (const auto& r : results) {
        std::cout << pipeline::to_string(r.stage) << ": " << r.steps << " steps, final loss " << r.final_loss << ", "
                  << r.checkpoint.string() << "\n";
      }
      return 0;
    }
    if (eval->parsed()) {
      RunConfig c = ov.build();
      const auto ckpt = checkpoint.empty() ? pipeline::checkpoint_dir(c.run_dir, pipeline::Stage::Depth) : fs::path(checkpoint);
      const auto dir = report_dir.empty() ? fs::path(c.run_dir) / "eval" : fs::path(report_dir);
      auto r = pipeline::evaluate(c, ckpt, pipeline::split_part_from_string(split_name), dir);
      std::cout << r.frames.size() << " frames\n";
      print_report("metafe         ", r.report);
      print_report("constant median", r.baseline);
      std::cout << "reports in " << dir.string() << "\n";
      return 0;
    }
    if (abl->parsed()) {
      RunConfig c = ov.build();
      auto rows = pipeline::ablate(c);
      const auto dir = fs::path(c.run_dir) / "ablation";
      fs::create_directories(dir);
      std::ofstream(dir / "table.md") << pipeline::ablation_table(rows);
      std::ofstream(dir / "table.csv") << pipeline::ablation_csv(rows);
      std::cout << pipeline::ablation_table(rows);
      return 0;
    }
    if (cka->parsed()) {
      RunConfig c = ov.build();
      const auto ckpt = checkpoint.empty() ? pipeline::checkpoint_dir(c.run_dir, pipeline::Stage::Depth) : fs::path(checkpoint);
      const auto dir = out_dir.empty() ? fs::path(c.run_dir) / "cka" : fs::path(out_dir);
      auto r = pipeline::analyze_cka(c, ckpt, dir);
      std::cout << "deeper block (0-6) mean CKA " << r.deeper_mean << "\nmiddle block (7-11) mean CKA " << r.middle_mean
                << "\ngrids in " << dir.string() << "\n";
      return 0;
    }
    if (show->parsed()) {
      std::cout << ov.build().to_json().dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
