#include "metafe/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <ATen/CPUGeneratorImpl.h>

namespace metafe::diffusion {

namespace F = torch::nn::functional;

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("NoiseSchedule: need at least one step");
  std::vector<double> betas(steps);
  for (int i = 0; i < steps; ++i) {
    betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  return from_betas(betas);
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas) {
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.betas = torch::tensor(betas, torch::kFloat64);
  s.alpha_bars = torch::cumprod(1.0 - s.betas, 0);
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (steps < 1 || betas.numel() != steps) throw std::invalid_argument("NoiseSchedule: inconsistent step count");
  if (!(betas > 0).all().item<bool>() || !(betas < 1).all().item<bool>()) {
    throw std::invalid_argument("NoiseSchedule: betas must lie in (0,1)");
  }
  if (steps > 1 && !(betas.slice(0, 1) >= betas.slice(0, 0, steps - 1)).all().item<bool>()) {
    throw std::invalid_argument("NoiseSchedule: betas must be nondecreasing");
  }
}

double NoiseSchedule::alpha_bar(int k) const {
  if (k < 0 || k > steps) throw std::out_of_range("timestep " + std::to_string(k) + " outside [0, " + std::to_string(steps) + "]");
  return k == 0 ? 1.0 : alpha_bars[k - 1].item<double>();
}

torch::Tensor NoiseSchedule::alpha_bar(const torch::Tensor& k) const {
  if ((k < 0).any().item<bool>() || (k > steps).any().item<bool>()) {
    throw std::out_of_range("timestep outside [0, " + std::to_string(steps) + "]");
  }
  auto padded = torch::cat({torch::ones({1}, torch::kFloat64), alpha_bars});
  return padded.index_select(0, k.to(torch::kLong));
}

torch::Tensor timestep_embedding(const torch::Tensor& k, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
  auto args = k.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t time_dim) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(8, in));
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  time_ = register_module("time", torch::nn::Linear(time_dim, out));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(8, out));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
  h = h + time_->forward(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2_->forward(torch::silu(norm2_->forward(h)));
  return h + (skip_ ? skip_->forward(x) : x);
}

DenoiserImpl::DenoiserImpl(DenoiserOptions options) : options_(options) {
  const auto c = options_.latent_channels, w = options_.base_width, td = options_.time_dim;
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(td, 2 * td), torch::nn::SiLU(),
                                                                torch::nn::Linear(2 * td, 2 * td)));
  in_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, w, 3).padding(1)));
  enc1_ = register_module("enc1", ResBlock(w, w, 2 * td));
  down1_ = register_module("down1", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w, 3).stride(2).padding(1)));
  enc2_ = register_module("enc2", ResBlock(w, 2 * w, 2 * td));
  down2_ = register_module("down2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * w, 2 * w, 3).stride(2).padding(1)));
  mid_ = register_module("mid", ResBlock(2 * w, 2 * w, 2 * td));
  dec2_ = register_module("dec2", ResBlock(4 * w, 2 * w, 2 * td));
  dec1_ = register_module("dec1", ResBlock(3 * w, w, 2 * td));
  out_norm_ = register_module("out_norm", torch::nn::GroupNorm(8, w));
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, c, 3).padding(1)));
  torch::NoGradGuard guard;
  out_->weight.zero_();
  out_->bias.zero_();
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z_k, const torch::Tensor& k, const torch::Tensor& tlf) {
  if (!z_k.sizes().equals(tlf.sizes()) || z_k.dim() != 4 || z_k.size(1) != options_.latent_channels) {
    throw std::invalid_argument("Denoiser: noisy latent and TLF must both be [B,C,m,n]");
  }
  auto temb = time_mlp_->forward(timestep_embedding(k, options_.time_dim));
  auto h0 = in_->forward(torch::cat({z_k, tlf}, 1));
  auto s1 = enc1_->forward(h0, temb);
  auto s2 = enc2_->forward(down1_->forward(s1), temb);
  auto h = mid_->forward(down2_->forward(s2), temb);
  auto up = [](const torch::Tensor& x, const torch::Tensor& like) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kNearest));
  };
  h = dec2_->forward(torch::cat({up(h, s2), s2}, 1), temb);
  h = dec1_->forward(torch::cat({up(h, s1), s1}, 1), temb);
  return out_->forward(torch::silu(out_norm_->forward(h)));
}

LatentFeature forward_diffuse(const LatentFeature& z0, int k, const LatentFeature& noise, const NoiseSchedule& schedule) {
  if (!z0.grid.sizes().equals(noise.grid.sizes())) throw std::invalid_argument("forward_diffuse: noise shape mismatch");
  const double ab = schedule.alpha_bar(k);
  return {std::sqrt(ab) * z0.grid + std::sqrt(1.0 - ab) * noise.grid, LatentRole::Diffusion};
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& k, const torch::Tensor& noise,
                              const NoiseSchedule& schedule) {
  if (!z0.sizes().equals(noise.sizes())) throw std::invalid_argument("forward_diffuse: noise shape mismatch");
  if (k.dim() != 1 || k.size(0) != z0.size(0)) throw std::invalid_argument("forward_diffuse: need one timestep per sample");
  std::vector<int64_t> view(z0.dim(), 1);
  view[0] = -1;
  auto ab = schedule.alpha_bar(k).to(z0.scalar_type()).view(view);
  return torch::sqrt(ab) * z0 + torch::sqrt(1.0 - ab) * noise;
}

torch::Tensor tcdm_loss(const NoisePredictor& model, const torch::Tensor& z0, const torch::Tensor& tlf,
                        const NoiseSchedule& schedule, const torch::Tensor& k, const torch::Tensor& noise) {
  if (!z0.sizes().equals(tlf.sizes())) throw std::invalid_argument("tcdm_loss: latents and TLFs differ in shape");
  auto zk = forward_diffuse(z0, k, noise, schedule);
  auto pred = model(zk, k, tlf);
  auto loss = (noise - pred).pow(2).mean();
  if (!torch::isfinite(loss).item<bool>()) throw std::runtime_error("tcdm_loss: non-finite loss");
  return loss;
}

torch::Tensor tcdm_loss(const NoisePredictor& model, const torch::Tensor& z0, const torch::Tensor& tlf,
                        const NoiseSchedule& schedule, at::Generator& gen) {
  if (z0.size(0) == 0) throw std::invalid_argument("tcdm_loss: empty batch");
  auto k = torch::randint(1, schedule.steps + 1, {z0.size(0)}, gen, torch::kLong);
  auto noise = torch::randn(z0.sizes(), gen, z0.options());
  return tcdm_loss(model, z0, tlf, schedule, k, noise);
}

std::vector<int> sampling_timesteps(int total, int steps) {
  if (steps < 1 || steps > total) throw std::invalid_argument("sampling steps must be in [1, T]");
  std::vector<int> ks(steps);
  for (int i = 0; i < steps; ++i) {
    ks[i] = static_cast<int>(std::llround(static_cast<double>(i + 1) * total / steps));
  }
  return ks;
}

torch::Tensor sample_from(const NoisePredictor& model, const torch::Tensor& tlf, const torch::Tensor& initial_noise,
                          int steps, const NoiseSchedule& schedule) {
  torch::NoGradGuard guard;
  const auto ks = sampling_timesteps(schedule.steps, steps);
  auto x = initial_noise.clone();
  const auto b = x.size(0);
  for (int i = steps - 1; i >= 0; --i) {
    const int k = ks[i];
    const int k_prev = i > 0 ? ks[i - 1] : 0;
    const double ab = schedule.alpha_bar(k), ab_prev = schedule.alpha_bar(k_prev);
    auto eps = model(x, torch::full({b}, k, torch::kLong), tlf);
    if (!torch::isfinite(eps).all().item<bool>()) {
      throw std::runtime_error("sample: denoiser produced non-finite output at step " + std::to_string(k));
    }
    auto x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return x;
}

LatentFeature sample(const NoisePredictor& model, const LatentFeature& tlf, int steps, const NoiseSchedule& schedule,
                     at::Generator& gen) {
  const bool single = tlf.grid.dim() == 3;
  auto cond = single ? tlf.grid.unsqueeze(0) : tlf.grid;
  auto noise = torch::randn(cond.sizes(), gen, cond.options());
  auto out = sample_from(model, cond, noise, steps, schedule);
  return {single ? out.squeeze(0) : out, LatentRole::Diffusion};
}

NoisePredictor as_predictor(Denoiser& denoiser) {
  return [denoiser](const torch::Tensor& zk, const torch::Tensor& k, const torch::Tensor& tlf) mutable {
    return denoiser->forward(zk, k, tlf);
  };
}

at::Generator make_generator(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

}  // namespace metafe::diffusion
