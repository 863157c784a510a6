#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

namespace {

struct Batch {
  std::vector<Window> windows;
  torch::Tensor frames;  // [B,4,3,H,W]
  std::vector<uint64_t> seeds;
};

// Collects up to `size` windows from the stream; empty when the stream is exhausted.
Batch next_batch(WindowStream& stream, size_t size, uint64_t seed, size_t limit, size_t& taken) {
  Batch b;
  std::vector<torch::Tensor> frames;
  while (b.windows.size() < size && taken < limit) {
    auto w = stream.next();
    if (!w) break;
    std::vector<torch::Tensor> f;
    for (const auto& fr : w->frames) f.push_back(fr.rgb);
    frames.push_back(torch::stack(f));
    b.seeds.push_back(frame_seed(seed, w->sequence, w->t));
    b.windows.push_back(std::move(*w));
    ++taken;
  }
  if (!frames.empty()) b.frames = torch::stack(frames);
  return b;
}

std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

RunConfig checkpoint_config(const fs::path& depth_checkpoint) {
  return RunConfig::from_json(read_meta(depth_checkpoint).config);
}

// Phase 1 as used by a depth checkpoint: unfrozen runs carry their own TLF and denoiser.
Phase1 phase1_for(const RunConfig& config, const fs::path& depth_checkpoint) {
  Phase1 p = load_phase1(config);
  if (!checkpoint_config(depth_checkpoint).freeze_phase1) {
    load_checkpoint(depth_checkpoint, {{"tlf", p.tlf.ptr()}, {"denoiser", p.denoiser.ptr()}});
    p.tlf->eval();
    p.denoiser->eval();
  }
  return p;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

const char* mark(bool on) { return on ? "✓" : "✗"; }

}  // namespace

torch::Tensor predict_depth(Phase1& phase1, Phase2& phase2, const RunConfig& config, const torch::Tensor& windows,
                            const std::vector<uint64_t>& seeds) {
  torch::NoGradGuard guard;
  auto latents = window_latents(phase1, windows, seeds, config.sampling_steps);
  auto disp = phase2.depth->forward(meta_feature(phase2, latents, config.cn_enabled)).full();
  return depthnets::disparity_to_depth(disp, config.min_depth, config.max_depth);
}

EvaluationResult evaluate(const RunConfig& config, const fs::path& depth_checkpoint, SplitPart part,
                          const fs::path& report_dir) {
  config.validate();
  // cn_enabled and the depth range are properties of the trained checkpoint.
  RunConfig trained = checkpoint_config(depth_checkpoint);
  RunConfig eval_config = config;
  eval_config.cn_enabled = trained.cn_enabled;
  eval_config.min_depth = trained.min_depth;
  eval_config.max_depth = trained.max_depth;

  Phase1 phase1 = phase1_for(config, depth_checkpoint);
  Phase2 phase2 = load_phase2(config, depth_checkpoint);

  auto index = load_dataset(config.dataset);
  auto split = split_sequences(index.sequences.size(), config.train_fraction, config.val_fraction, config.seed);
  const auto& seqs = part_of(split, part);
  for (auto s : seqs) {
    if (!index.sequences[s].has_depth) {
      throw std::runtime_error("evaluation needs ground-truth depth: " + index.sequences[s].directory.string());
    }
  }
  if (seqs.empty()) throw std::runtime_error("evaluation split is empty");

  EvaluationResult result;
  WindowStream stream(index, seqs, config.width, config.height, config.seed, false);
  size_t taken = 0;
  for (;;) {
    auto batch = next_batch(stream, 16, config.seed, SIZE_MAX, taken);
    if (batch.windows.empty()) break;
    auto depth = predict_depth(phase1, phase2, eval_config, batch.frames, batch.seeds);
    for (size_t i = 0; i < batch.windows.size(); ++i) {
      const auto& w = batch.windows[i];
      const auto gt = to_vector(w.depth->values);
      const auto pred = to_vector(depth[static_cast<int64_t>(i)]);
      FrameResult fr;
      fr.sequence = w.sequence;
      fr.t = w.t;
      fr.metrics = evalmetrics::evaluate_frame(pred, gt, config.eval_cap);
      fr.baseline = evalmetrics::evaluate_frame(std::vector<double>(gt.size(), 1.0), gt, config.eval_cap);
      result.frames.push_back(fr);
    }
  }

  std::vector<evalmetrics::MetricReport> m, b;
  for (const auto& f : result.frames) {
    m.push_back(f.metrics);
    b.push_back(f.baseline);
  }
  result.report = evalmetrics::aggregate(m, 0.95, config.bootstrap_resamples, config.seed);
  result.baseline = evalmetrics::aggregate(b, 0.95, config.bootstrap_resamples, config.seed);

  if (!report_dir.empty()) {
    fs::create_directories(report_dir);
    std::ofstream frames(report_dir / "frames.csv");
    frames << "sequence,t,abs_rel,sq_rel,rmse,rmse_log,delta\n" << std::setprecision(10);
    for (const auto& f : result.frames) {
      frames << index.sequences[f.sequence].directory.filename().string() << ',' << f.t;
      for (double v : f.metrics.values()) frames << ',' << v;
      frames << '\n';
    }
    std::ofstream summary(report_dir / "metrics.csv");
    summary << evalmetrics::csv_header("method,frames") << '\n'
            << evalmetrics::csv_row(result.report, "metafe," + std::to_string(result.frames.size())) << '\n'
            << evalmetrics::csv_row(result.baseline, "constant_median," + std::to_string(result.frames.size())) << '\n';
  }
  return result;
}

std::vector<AblationRow> ablate(const RunConfig& config) {
  config.validate();
  for (auto stage : {Stage::Vae, Stage::Diffusion, Stage::OfNet}) {
    if (!fs::exists(checkpoint_dir(config.run_dir, stage) / "meta.json")) train_stage(stage, config);
  }
  std::vector<AblationRow> rows;
  for (auto [wp, cn] : std::array<std::pair<bool, bool>, 4>{{{true, true}, {false, true}, {true, false}, {false, false}}}) {
    RunConfig cell = config;
    cell.init_mode = wp ? depthnets::InitMode::Pretrained : depthnets::InitMode::Scratch;
    cell.cn_enabled = cn;
    cell.upstream_dir = config.run_dir;
    cell.run_dir = (fs::path(config.run_dir) / "ablation" / (std::string("wp") + (wp ? "1" : "0") + "_cn" + (cn ? "1" : "0"))).string();

    // The main run already is the (WP, CN) cell when its flags match; reuse it.
    fs::path depth_dir = checkpoint_dir(config.run_dir, Stage::Depth);
    const bool reuse = wp && cn && fs::exists(depth_dir / "meta.json") && config.init_mode == cell.init_mode &&
                       checkpoint_config(depth_dir).cn_enabled && checkpoint_config(depth_dir).init_mode == cell.init_mode;
    if (reuse) {
      cell.run_dir = config.run_dir;
    } else {
      std::cerr << "[ablate] training cell WP=" << wp << " CN=" << cn << std::endl;
      depth_dir = train_stage(Stage::Depth, cell).checkpoint;
    }
    AblationRow row;
    row.wp = wp;
    row.cn = cn;
    row.run_dir = cell.run_dir;
    row.result = evaluate(cell, depth_dir, SplitPart::Test, fs::path(cell.run_dir) / "eval");
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << "| WP | CN | Abs Rel | Sq Rel | RMSE | RMSE log | delta<1.25 |\n"
    << "|----|----|---------|--------|------|----------|------------|\n";
  for (const auto& r : rows) {
    const auto& m = r.result.report;
    s << "| " << mark(r.wp) << " | " << mark(r.cn) << " | " << fmt(m.abs_rel) << " | " << fmt(m.sq_rel) << " | "
      << fmt(m.rmse) << " | " << fmt(m.rmse_log) << " | " << fmt(m.delta) << " |\n";
  }
  return s.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << evalmetrics::csv_header("wp,cn") << '\n';
  for (const auto& r : rows) s << evalmetrics::csv_row(r.result.report, std::string(mark(r.wp)) + "," + mark(r.cn)) << '\n';
  return s.str();
}

CkaReport analyze_cka(const RunConfig& config, const fs::path& depth_checkpoint, const fs::path& out_dir) {
  config.validate();
  RunConfig trained = checkpoint_config(depth_checkpoint);
  RunConfig eval_config = config;
  eval_config.cn_enabled = trained.cn_enabled;

  Phase1 phase1 = phase1_for(config, depth_checkpoint);
  Phase2 phase2 = load_phase2(config, depth_checkpoint);
  auto index = load_dataset(config.dataset);
  auto split = split_sequences(index.sequences.size(), config.train_fraction, config.val_fraction, config.seed);
  const auto& seqs = split.val.empty() ? split.test : split.val;

  analysis::ActivationDump rgb, depth;
  rgb.label = "rgb";
  depth.label = "depth";
  std::map<int, std::vector<torch::Tensor>> rgb_parts, depth_parts;
  WindowStream stream(index, seqs, config.width, config.height, config.seed, false);
  size_t taken = 0;
  const auto limit = static_cast<size_t>(config.cka_samples);
  for (;;) {
    auto batch = next_batch(stream, 16, config.seed, limit, taken);
    if (batch.windows.empty()) break;
    torch::NoGradGuard guard;
    auto latents = window_latents(phase1, batch.frames, batch.seeds, config.sampling_steps);
    auto a_rgb = phase1.vae->decode_rgb_activations(latents.z).activations;
    auto a_depth = phase2.depth->forward_activations(meta_feature(phase2, latents, eval_config.cn_enabled)).activations;
    for (int l = 0; l < autoenc::kDecoderLayers; ++l) {
      rgb_parts[l].push_back(a_rgb[l]);
      depth_parts[l].push_back(a_depth[l]);
    }
  }
  if (taken < 2) throw std::runtime_error("CKA analysis needs at least two frames");
  for (int l = 0; l < autoenc::kDecoderLayers; ++l) {
    rgb.layers[l] = torch::cat(rgb_parts[l]);
    depth.layers[l] = torch::cat(depth_parts[l]);
  }
  rgb_parts.clear();
  depth_parts.clear();

  fs::create_directories(out_dir);
  rgb.save(out_dir / "activations" / "rgb");
  depth.save(out_dir / "activations" / "depth");

  CkaReport report;
  report.depth_vs_rgb = analysis::cka_grid(depth, rgb, config.cka_dim);
  report.depth_self = analysis::cka_grid(depth, depth, config.cka_dim);
  report.rgb_self = analysis::cka_grid(rgb, rgb, config.cka_dim);
  report.deeper_mean = report.depth_vs_rgb.block_mean(0, 6);
  report.middle_mean = report.depth_vs_rgb.block_mean(7, 11);

  for (const auto& [name, grid] : {std::pair<const char*, const analysis::SimilarityGrid*>{"depth_vs_rgb", &report.depth_vs_rgb},
                                   {"depth_self", &report.depth_self},
                                   {"rgb_self", &report.rgb_self}}) {
    std::ofstream(out_dir / (std::string(name) + ".csv")) << grid->to_csv();
    analysis::write_heatmap(*grid, out_dir / (std::string(name) + ".png"));
  }
  nlohmann::json summary = {{"samples", taken},
                            {"deeper_block_mean", report.deeper_mean},
                            {"middle_block_mean", report.middle_mean},
                            {"checkpoint", depth_checkpoint.string()}};
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << "\n";
  return report;
}

}  // namespace metafe::pipeline
