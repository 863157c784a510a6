#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

namespace {

using Terms = std::vector<std::pair<std::string, torch::Tensor>>;

uint64_t stage_seed(const RunConfig& config, Stage stage) {
  return config.seed * 7919ULL + static_cast<uint64_t>(stage) + 1;
}

// Shuffled mini-batches over n samples, reshuffling at each epoch boundary.
class Batcher {
 public:
  Batcher(size_t n, int batch, uint64_t seed) : order_(n), batch_(static_cast<size_t>(batch)), rng_(seed) {
    if (n == 0) throw std::runtime_error("no training samples for this stage");
    std::iota(order_.begin(), order_.end(), size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<size_t> next() {
    if (pos_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
      ++epoch_;
    }
    const size_t end = std::min(order_.size(), pos_ + batch_);
    std::vector<size_t> idx(order_.begin() + pos_, order_.begin() + end);
    pos_ = end;
    return idx;
  }
  int epoch() const { return epoch_; }
  size_t steps_per_epoch() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  std::vector<size_t> order_;
  size_t batch_;
  std::mt19937_64 rng_;
  size_t pos_ = 0;
  int epoch_ = 0;
};

int total_steps(const StageSchedule& s, const Batcher& b) {
  return s.steps > 0 ? s.steps : s.epochs * static_cast<int>(b.steps_per_epoch());
}

void check_finite(Stage stage, int step, const Terms& terms) {
  for (const auto& [name, value] : terms) {
    if (!value.defined() || !std::isfinite(value.item<double>())) {
      throw std::runtime_error("non-finite loss in stage " + std::string(to_string(stage)) + " at step " +
                               std::to_string(step) + " (term " + name + ")");
    }
  }
}

struct TrainData {
  DatasetIndex index;
  Split split;
  std::vector<SequenceData> sequences;  // train part only, same order as split.train
};

TrainData load_train(const RunConfig& config) {
  TrainData d;
  d.index = load_dataset(config.dataset);
  d.split = split_sequences(d.index.sequences.size(), config.train_fraction, config.val_fraction, config.seed);
  for (auto s : d.split.train) d.sequences.push_back(load_sequence(d.index.sequences[s], config.width, config.height));
  return d;
}

std::vector<torch::Tensor> trainable(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) {
    if (p.requires_grad()) out.push_back(p);
  }
  return out;
}

void append(std::vector<torch::Tensor>& dst, const std::vector<torch::Tensor>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

// Shared driver: draws batches, runs `step`, checks and logs terms, applies the optimizer.
template <class StepFn>
double run_loop(Stage stage, const RunConfig& config, Batcher& batcher, torch::optim::Optimizer& opt,
                const std::vector<torch::Tensor>& clip_params, double clip, TrainingLog& log, StepFn&& step,
                int& steps_out) {
  const int steps = total_steps(config.schedule(stage), batcher);
  double last = 0.0;
  for (int i = 1; i <= steps; ++i) {
    auto idx = batcher.next();
    opt.zero_grad();
    Terms terms = step(idx, batcher.epoch());
    check_finite(stage, i, terms);
    terms.front().second.backward();
    if (clip > 0.0) torch::nn::utils::clip_grad_norm_(clip_params, clip);
    opt.step();
    for (const auto& [name, value] : terms) log.record(stage, i, name, value.template item<double>());
    last = terms.front().second.template item<double>();
    if (i % 50 == 0 || i == steps) {
      std::cerr << "[" << to_string(stage) << "] step " << i << "/" << steps << " loss " << last << std::endl;
    }
  }
  steps_out = steps;
  return last;
}

torch::Tensor window_tensor(const SequenceData& seq, size_t t) { return seq.frames.slice(0, t - 3, t + 1); }

StageResult train_vae(const RunConfig& config, TrainingLog& log) {
  auto data = load_train(config);
  std::vector<torch::Tensor> all;
  for (const auto& s : data.sequences) all.push_back(s.frames);
  auto frames = torch::cat(all);

  torch::manual_seed(stage_seed(config, Stage::Vae));
  auto vae = make_vae(config);
  vae->train();
  torch::optim::Adam opt(vae->parameters(), torch::optim::AdamOptions(config.stage_learning_rate(Stage::Vae)));
  Batcher batcher(static_cast<size_t>(frames.size(0)), config.batch_size, stage_seed(config, Stage::Vae));
  int steps = 0;
  const double last = run_loop(Stage::Vae, config, batcher, opt, {}, 0.0, log,
      [&](const std::vector<size_t>& idx, int) -> Terms {
        auto batch = frames.index_select(0, torch::tensor(std::vector<int64_t>(idx.begin(), idx.end())));
        auto l = vae->loss(batch);
        return {{"total", l.total}, {"reconstruction", l.reconstruction}, {"kl", l.kl}};
      }, steps);

  vae->eval();
  const int64_t n = std::min<int64_t>(frames.size(0), 512);
  auto pick = torch::linspace(0, static_cast<double>(frames.size(0) - 1), n).round().to(torch::kLong);
  vae->fit_latent_scale(frames.index_select(0, pick));
  log.record(Stage::Vae, steps, "latent_scale", vae->latent_scale());

  const auto dir = checkpoint_dir(config.run_dir, Stage::Vae);
  save_checkpoint(dir, Stage::Vae, {{"vae", vae.ptr()}}, &opt, config, steps, last);
  return {Stage::Vae, dir, steps, last};
}

StageResult train_diffusion(const RunConfig& config, TrainingLog& log) {
  const auto vae_dir = find_checkpoint(config, Stage::Vae);
  auto data = load_train(config);

  auto vae = make_vae(RunConfig::from_json(read_meta(vae_dir).config));
  load_checkpoint(vae_dir, {{"vae", vae.ptr()}});
  vae->eval();

  std::vector<torch::Tensor> latents;
  std::vector<std::pair<size_t, size_t>> samples;
  {
    torch::NoGradGuard guard;
    for (size_t s = 0; s < data.sequences.size(); ++s) {
      std::vector<torch::Tensor> parts;
      for (const auto& chunk : data.sequences[s].frames.split(64)) parts.push_back(vae->encode(chunk));
      latents.push_back(torch::cat(parts));
      for (size_t t = 3; t < data.sequences[s].size(); ++t) samples.emplace_back(s, t);
    }
  }

  torch::manual_seed(stage_seed(config, Stage::Diffusion));
  Phase1 p = make_phase1(config);
  p.tlf->train();
  p.denoiser->train();
  std::vector<torch::Tensor> params = p.tlf->parameters();
  append(params, p.denoiser->parameters());
  torch::optim::Adam opt(params, torch::optim::AdamOptions(config.stage_learning_rate(Stage::Diffusion)));
  auto gen = diffusion::make_generator(stage_seed(config, Stage::Diffusion));
  auto predictor = diffusion::as_predictor(p.denoiser);
  Batcher batcher(samples.size(), config.batch_size, stage_seed(config, Stage::Diffusion));
  int steps = 0;
  const double last = run_loop(Stage::Diffusion, config, batcher, opt, params, config.grad_clip, log,
      [&](const std::vector<size_t>& idx, int) -> Terms {
        std::vector<torch::Tensor> z0, z1, z2, z3;
        for (auto i : idx) {
          const auto [s, t] = samples[i];
          z0.push_back(latents[s][t]);
          z1.push_back(latents[s][t - 1]);
          z2.push_back(latents[s][t - 2]);
          z3.push_back(latents[s][t - 3]);
        }
        auto tlf = p.tlf->forward(torch::stack(z3), torch::stack(z2), torch::stack(z1));
        auto loss = diffusion::tcdm_loss(predictor, torch::stack(z0), tlf, p.schedule, gen);
        return {{"total", loss}};
      }, steps);

  const auto dir = checkpoint_dir(config.run_dir, Stage::Diffusion);
  save_checkpoint(dir, Stage::Diffusion, {{"tlf", p.tlf.ptr()}, {"denoiser", p.denoiser.ptr()}}, &opt, config, steps,
                  last);
  return {Stage::Diffusion, dir, steps, last};
}

StageResult train_ofnet(const RunConfig& config, TrainingLog& log) {
  auto data = load_train(config);
  struct Pair {
    size_t seq, target, source;
  };
  std::vector<Pair> pairs;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    for (size_t t = 0; t < data.sequences[s].size(); ++t) {
      if (t > 0) pairs.push_back({s, t, t - 1});
      if (t + 1 < data.sequences[s].size()) pairs.push_back({s, t, t + 1});
    }
  }

  torch::manual_seed(stage_seed(config, Stage::OfNet));
  depthnets::FlowNet net;
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.stage_learning_rate(Stage::OfNet)));
  Batcher batcher(pairs.size(), config.batch_size, stage_seed(config, Stage::OfNet));
  int steps = 0;
  const double last = run_loop(Stage::OfNet, config, batcher, opt, {}, 0.0, log,
      [&](const std::vector<size_t>& idx, int) -> Terms {
        std::vector<torch::Tensor> tg, sc;
        for (auto i : idx) {
          tg.push_back(data.sequences[pairs[i].seq].frames[pairs[i].target]);
          sc.push_back(data.sequences[pairs[i].seq].frames[pairs[i].source]);
        }
        auto target = torch::stack(tg), source = torch::stack(sc);
        auto flow = net->forward(source, target);
        auto warped = geometry::inverse_warp(source, geometry::flow_field(flow));
        auto photo = objectives::photometric_loss(target, warped.image, warped.mask, config.loss.alpha);
        auto smooth = objectives::flow_smoothness(flow, target);
        return {{"total", photo + config.flow_smoothness * smooth}, {"photometric", photo}, {"smoothness", smooth}};
      }, steps);

  const auto dir = checkpoint_dir(config.run_dir, Stage::OfNet);
  save_checkpoint(dir, Stage::OfNet, {{"flownet", net.ptr()}}, &opt, config, steps, last);
  return {Stage::OfNet, dir, steps, last};
}

StageResult train_depth(const RunConfig& config, TrainingLog& log) {
  // Prerequisites first so a missing one is reported before any data is touched.
  find_checkpoint(config, Stage::Vae);
  find_checkpoint(config, Stage::Diffusion);
  find_checkpoint(config, Stage::OfNet);
  Phase1 phase1 = load_phase1(config);
  auto flownet = load_flownet(config);
  auto data = load_train(config);

  const auto intrinsics = data.sequences.front().intrinsics;
  for (const auto& s : data.sequences) {
    if (s.intrinsics.matrix() != intrinsics.matrix()) {
      throw std::runtime_error("depth stage needs one camera model across the training split");
    }
  }

  // Targets need a source on both sides and three predecessors for the TLF.
  std::vector<std::pair<size_t, size_t>> samples;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    for (size_t t = 3; t + 1 < data.sequences[s].size(); ++t) samples.emplace_back(s, t);
  }
  if (samples.empty()) throw std::runtime_error("depth stage: sequences are too short for a target with two sources");

  // Phase 1 and the OF-Net are frozen, so their outputs are cached once.
  torch::Tensor z_cache, flow_cache;
  auto refresh_latents = [&]() {
    std::vector<torch::Tensor> zs, zhs;
    for (size_t b = 0; b < samples.size(); b += 16) {
      std::vector<torch::Tensor> win;
      std::vector<uint64_t> seeds;
      for (size_t i = b; i < std::min(samples.size(), b + 16); ++i) {
        const auto [s, t] = samples[i];
        win.push_back(window_tensor(data.sequences[s], t));
        seeds.push_back(frame_seed(config.seed, data.split.train[s], t));
      }
      auto lat = window_latents(phase1, torch::stack(win), seeds, config.sampling_steps);
      zs.push_back(lat.z);
      zhs.push_back(lat.z_hat);
    }
    z_cache = torch::cat(zs);
    return torch::cat(zhs);
  };
  std::cerr << "[depth] caching latents and flows for " << samples.size() << " targets" << std::endl;
  torch::Tensor z_hat_cache = refresh_latents();
  {
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> flows;
    for (size_t b = 0; b < samples.size(); b += 16) {
      std::vector<torch::Tensor> tg, prev, next;
      for (size_t i = b; i < std::min(samples.size(), b + 16); ++i) {
        const auto [s, t] = samples[i];
        tg.push_back(data.sequences[s].frames[t]);
        prev.push_back(data.sequences[s].frames[t - 1]);
        next.push_back(data.sequences[s].frames[t + 1]);
      }
      auto target = torch::stack(tg);
      flows.push_back(torch::stack({flownet->forward(torch::stack(prev), target),
                                    flownet->forward(torch::stack(next), target)}, 1));
    }
    flow_cache = torch::cat(flows);  // [N,2,2,H,W]
  }

  torch::manual_seed(stage_seed(config, Stage::Depth));
  Phase2 p = make_phase2(config);
  auto rgb_decoder = phase1.vae->decoder();
  p.depth->initialize_from(rgb_decoder, config.init_mode);
  p.depth->train();
  p.pose->train();
  p.appearance->train();
  p.cross_norm->train();

  // Two parameter groups: the decoder side (depth decoder, cross normalization) and everything else.
  std::vector<torch::Tensor> decoder_params = trainable(p.depth->parameters());
  append(decoder_params, trainable(p.cross_norm->parameters()));
  std::vector<torch::Tensor> other_params = p.pose->parameters();
  append(other_params, p.appearance->parameters());
  auto predictor = diffusion::as_predictor(phase1.denoiser);
  auto gen = diffusion::make_generator(stage_seed(config, Stage::Depth));
  if (!config.freeze_phase1) {
    phase1.tlf->train();
    phase1.denoiser->train();
    append(other_params, phase1.tlf->parameters());
    append(other_params, phase1.denoiser->parameters());
  }
  std::vector<torch::Tensor> params = decoder_params;
  append(params, other_params);
  const double lr = config.stage_learning_rate(Stage::Depth);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(decoder_params, std::make_unique<torch::optim::AdamOptions>(lr));
  groups.emplace_back(other_params, std::make_unique<torch::optim::AdamOptions>(lr));
  torch::optim::Adam opt(groups, torch::optim::AdamOptions(lr));
  auto& decoder_lr = static_cast<torch::optim::AdamOptions&>(opt.param_groups()[0].options());

  const int64_t h = config.height, w = config.width;
  int current_epoch = 0;
  Batcher batcher(samples.size(), config.batch_size, stage_seed(config, Stage::Depth));
  // While the pose head is still at zero the warp ignores depth, and the only depth gradient is
  // the edge smoothness; Adam's sign-sized first steps then flatten the disparity into the
  // sigmoid's saturated end within a few iterations. The decoder is therefore held for `warmup`
  // steps and its learning rate ramped up linearly over as many again, since Adam's first
  // updates after release are sign-sized too.
  const int warmup = static_cast<int>(config.pose_warmup * total_steps(config.depth, batcher));
  int step_index = 0;
  int steps = 0;
  const double last = run_loop(Stage::Depth, config, batcher, opt, params, config.grad_clip, log,
      [&](const std::vector<size_t>& idx, int epoch) -> Terms {
        if (!config.freeze_phase1 && epoch != current_epoch) {
          current_epoch = epoch;
          z_hat_cache = refresh_latents();
        }
        auto sel = torch::tensor(std::vector<int64_t>(idx.begin(), idx.end()));
        std::vector<torch::Tensor> tg, prev, next, wins;
        for (auto i : idx) {
          const auto [s, t] = samples[i];
          tg.push_back(data.sequences[s].frames[t]);
          prev.push_back(data.sequences[s].frames[t - 1]);
          next.push_back(data.sequences[s].frames[t + 1]);
          if (!config.freeze_phase1) wins.push_back(window_tensor(data.sequences[s], t));
        }
        auto target = torch::stack(tg);
        const std::array<torch::Tensor, 2> sources = {torch::stack(prev), torch::stack(next)};
        WindowLatents lat{z_cache.index_select(0, sel), z_hat_cache.index_select(0, sel)};
        auto flows = flow_cache.index_select(0, sel);

        const bool warming_up = step_index < warmup;
        decoder_lr.lr(warmup > 0 ? lr * std::clamp(static_cast<double>(step_index - warmup + 1) / warmup, 0.0, 1.0) : lr);
        ++step_index;
        auto pyramid = [&] {
          torch::AutoGradMode grad_mode(!warming_up);
          return p.depth->forward(meta_feature(p, lat, config.cn_enabled));
        }();
        std::array<torch::Tensor, 3> disp;
        for (int s = 0; s < 3; ++s) disp[s] = depthnets::upsample_to(pyramid.scales[s], h, w);

        auto photo = torch::zeros({});
        auto rs = torch::zeros({});
        auto ax = torch::zeros({});
        for (int j = 0; j < 2; ++j) {
          const auto& source = sources[j];
          auto flow = flows.select(1, j);
          auto pose = geometry::pose_matrix_from_params(p.pose->forward(target, source));
          auto flow_warp = geometry::inverse_warp(source, geometry::flow_field(flow));
          auto c_delta = p.appearance->forward(flow_warp.image, target, flow);
          // The AF-Net sees the target, so under the main term it would learn target minus source and
          // explain the motion away. It is fitted only through the auxiliary and smoothness terms; the
          // main term uses its residual as a fixed calibration.
          const auto calibration = c_delta.detach();
          for (int s = 0; s < 3; ++s) {
            // Mean-normalised so the global scale lives in the pose translation. Otherwise the early
            // steps, with translation still near zero, shrink depth until the sigmoid saturates at d_min.
            auto depth = depthnets::disparity_to_depth(disp[s], config.min_depth, config.max_depth);
            depth = depth / depth.mean({1, 2, 3}, true);
            auto warped = geometry::inverse_warp(source, geometry::project_correspondence(intrinsics, depth, pose));
            photo = photo + objectives::photometric_loss(target, warped.image + calibration, warped.mask, config.loss.alpha);
            if (s == 2) rs = rs + objectives::residual_smoothness(c_delta, target, warped.image);
          }
          // Residual sign matches the main term: target ~ flow-warped source + C.
          ax = ax + objectives::auxiliary_loss(target, flow_warp.image, c_delta, flow_warp.mask, config.loss.alpha);
        }
        auto es = torch::zeros({});
        for (int s = 0; s < 3; ++s) es = es + objectives::edge_smoothness(disp[s], target);

        objectives::LossParts parts{photo / 6.0, rs / 2.0, ax / 2.0, es / 3.0};
        auto total = objectives::total_loss(parts, config.loss);
        Terms terms{{"total", total},
                    {"photometric", parts.photometric},
                    {"residual_smoothness", parts.residual_smoothness},
                    {"auxiliary", parts.auxiliary},
                    {"edge_smoothness", parts.edge_smoothness}};
        if (!config.freeze_phase1) {
          auto win = torch::stack(wins);
          auto b = win.size(0);
          auto z = phase1.vae->encode(win.reshape({b * 4, 3, h, w})).detach();
          z = z.view({b, 4, z.size(1), z.size(2), z.size(3)});
          auto tlf = phase1.tlf->forward(z.select(1, 0), z.select(1, 1), z.select(1, 2));
          auto tc = diffusion::tcdm_loss(predictor, z.select(1, 3), tlf, phase1.schedule, gen);
          terms.front().second = total + tc;
          terms.emplace_back("tcdm", tc);
        }
        return terms;
      }, steps);

  std::vector<NamedModule> modules = {{"depth", p.depth.ptr()},
                                      {"pose", p.pose.ptr()},
                                      {"appearance", p.appearance.ptr()},
                                      {"cross_norm", p.cross_norm.ptr()}};
  if (!config.freeze_phase1) {
    modules.push_back({"tlf", phase1.tlf.ptr()});
    modules.push_back({"denoiser", phase1.denoiser.ptr()});
  }
  const auto dir = checkpoint_dir(config.run_dir, Stage::Depth);
  save_checkpoint(dir, Stage::Depth, modules, &opt, config, steps, last);
  return {Stage::Depth, dir, steps, last};
}

}  // namespace

TrainingLog::TrainingLog(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  out_.open(file, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open training log " + file.string());
  out_.precision(9);
}

void TrainingLog::record(Stage stage, int step, std::string_view term, double value) {
  out_ << "stage=" << to_string(stage) << " step=" << step << " term=" << term << " value=" << value << '\n';
}

StageResult train_stage(Stage stage, const RunConfig& config) {
  config.validate();
  if (config.dataset.empty()) throw std::invalid_argument("RunConfig: dataset path is empty");
  fs::create_directories(config.run_dir);
  TrainingLog log(fs::path(config.run_dir) / "train.log");
  switch (stage) {
    case Stage::Vae: return train_vae(config, log);
    case Stage::Diffusion: return train_diffusion(config, log);
    case Stage::OfNet: return train_ofnet(config, log);
    case Stage::Depth: return train_depth(config, log);
  }
  throw std::invalid_argument("bad stage");
}

std::vector<StageResult> train_all(const RunConfig& config) {
  std::vector<StageResult> out;
  for (auto s : kStages) out.push_back(train_stage(s, config));
  return out;
}

}  // namespace metafe::pipeline
