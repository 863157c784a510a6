#include <stdexcept>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

autoenc::Autoencoder make_vae(const RunConfig& config) {
  autoenc::AutoencoderOptions o;
  o.latent_channels = config.latent_channels;
  o.encoder.latent_channels = config.latent_channels;
  o.decoder.latent_channels = config.latent_channels;
  return autoenc::Autoencoder(o);
}

Phase1 make_phase1(const RunConfig& config) {
  Phase1 p;
  p.vae = make_vae(config);
  p.tlf = autoenc::TemporalProjection(config.latent_channels);
  p.tlf->reset_to_average();
  diffusion::DenoiserOptions d;
  d.latent_channels = config.latent_channels;
  d.base_width = config.denoiser_width;
  p.denoiser = diffusion::Denoiser(d);
  p.schedule = diffusion::NoiseSchedule::linear(config.diffusion_timesteps);
  return p;
}

Phase2 make_phase2(const RunConfig& config) {
  Phase2 p;
  autoenc::DecoderOptions d;
  d.latent_channels = config.latent_channels;
  p.depth = depthnets::DepthDecoder(d);
  p.pose = depthnets::PoseNet();
  p.appearance = depthnets::AppearanceNet();
  p.cross_norm = crossnorm::CrossNorm(config.cross_norm, config.latent_channels);
  return p;
}

Phase1 load_phase1(const RunConfig& config) {
  const auto vae_dir = find_checkpoint(config, Stage::Vae);
  const auto diff_dir = find_checkpoint(config, Stage::Diffusion);
  // Architecture follows the checkpoint that produced the weights, not the caller's config.
  auto trained = RunConfig::from_json(read_meta(diff_dir).config);
  Phase1 p = make_phase1(trained);
  load_checkpoint(vae_dir, {{"vae", p.vae.ptr()}});
  load_checkpoint(diff_dir, {{"tlf", p.tlf.ptr()}, {"denoiser", p.denoiser.ptr()}});
  p.vae->eval();
  p.tlf->eval();
  p.denoiser->eval();
  return p;
}

depthnets::FlowNet load_flownet(const RunConfig& config) {
  depthnets::FlowNet net;
  load_checkpoint(find_checkpoint(config, Stage::OfNet), {{"flownet", net.ptr()}});
  net->eval();
  return net;
}

Phase2 load_phase2(const RunConfig& config, const fs::path& depth_checkpoint) {
  auto trained = RunConfig::from_json(read_meta(depth_checkpoint).config);
  trained.run_dir = config.run_dir;
  Phase2 p = make_phase2(trained);
  load_checkpoint(depth_checkpoint, {{"depth", p.depth.ptr()},
                                     {"pose", p.pose.ptr()},
                                     {"appearance", p.appearance.ptr()},
                                     {"cross_norm", p.cross_norm.ptr()}});
  p.depth->eval();
  p.pose->eval();
  p.appearance->eval();
  p.cross_norm->eval();
  return p;
}

uint64_t frame_seed(uint64_t seed, size_t sequence, size_t t) {
  // splitmix64 finaliser over the packed key
  uint64_t x = seed ^ (static_cast<uint64_t>(sequence) << 32) ^ static_cast<uint64_t>(t);
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

WindowLatents window_latents(Phase1& phase1, const torch::Tensor& windows, const std::vector<uint64_t>& seeds,
                             int sampling_steps) {
  if (windows.dim() != 5 || windows.size(1) != 4) throw std::invalid_argument("window_latents expects [B,4,3,H,W]");
  const auto b = windows.size(0);
  if (static_cast<int64_t>(seeds.size()) != b) throw std::invalid_argument("window_latents: one seed per window");
  torch::NoGradGuard guard;
  auto flat = windows.reshape({b * 4, windows.size(2), windows.size(3), windows.size(4)});
  auto z = phase1.vae->encode(flat);
  z = z.view({b, 4, z.size(1), z.size(2), z.size(3)});
  auto tlf = phase1.tlf->forward(z.select(1, 0), z.select(1, 1), z.select(1, 2));
  std::vector<torch::Tensor> noise;
  for (auto s : seeds) {
    auto gen = diffusion::make_generator(s);
    noise.push_back(torch::randn({tlf.size(1), tlf.size(2), tlf.size(3)}, gen, tlf.options()));
  }
  auto z_hat = diffusion::sample_from(diffusion::as_predictor(phase1.denoiser), tlf, torch::stack(noise),
                                      sampling_steps, phase1.schedule);
  return {z.select(1, 3).contiguous(), z_hat};
}

torch::Tensor meta_feature(Phase2& phase2, const WindowLatents& latents, bool cn_enabled) {
  return cn_enabled ? phase2.cross_norm->forward(latents.z, latents.z_hat) : latents.z_hat;
}

}  // namespace metafe::pipeline
