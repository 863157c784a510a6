#pragma once

#include <functional>
#include <vector>

#include <ATen/core/Generator.h>

#include "metafe/types.hpp"

namespace metafe::diffusion {

/// Discrete noise schedule; timesteps are 1-based, k = 0 stands for the clean latent.
struct NoiseSchedule {
  int steps = 0;
  torch::Tensor betas;       // [T] float64
  torch::Tensor alpha_bars;  // [T] float64, cumulative products of (1 - beta)

  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule from_betas(const std::vector<double>& betas);

  /// alpha_bar for k in [0, T]; alpha_bar(0) = 1.
  double alpha_bar(int k) const;
  /// [B] float64 alpha_bar values for a long tensor of timesteps.
  torch::Tensor alpha_bar(const torch::Tensor& k) const;
  void validate() const;
};

/// epsilon_theta(z_k, k, TLF).
using NoisePredictor =
    std::function<torch::Tensor(const torch::Tensor& z_k, const torch::Tensor& k, const torch::Tensor& tlf)>;

struct DenoiserOptions {
  int64_t latent_channels = 4;
  int64_t base_width = 64;
  int64_t time_dim = 128;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Three-level UNet over latent grids. The TLF is concatenated to the noisy latent at the input,
/// so the first convolution sees 2C channels; the output has C channels.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserOptions options = {});
  torch::Tensor forward(const torch::Tensor& z_k, const torch::Tensor& k, const torch::Tensor& tlf);
  const DenoiserOptions& options() const { return options_; }

 private:
  DenoiserOptions options_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_{nullptr}, down1_{nullptr}, down2_{nullptr}, out_{nullptr};
  ResBlock enc1_{nullptr}, enc2_{nullptr}, mid_{nullptr}, dec2_{nullptr}, dec1_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Sinusoidal embedding of integer timesteps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& k, int64_t dim);

/// sqrt(alpha_bar_k) * z0 + sqrt(1 - alpha_bar_k) * noise. Throws when k is outside [0, T].
LatentFeature forward_diffuse(const LatentFeature& z0, int k, const LatentFeature& noise,
                              const NoiseSchedule& schedule);
/// Batched form with one timestep per sample, k: [B] long.
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& k, const torch::Tensor& noise,
                              const NoiseSchedule& schedule);

/// Mean over batch and elements of ||eps - eps_theta(z_k, k, TLF)||^2, k uniform in [1, T],
/// eps ~ N(0, I), both drawn from `gen`.
torch::Tensor tcdm_loss(const NoisePredictor& model, const torch::Tensor& z0, const torch::Tensor& tlf,
                        const NoiseSchedule& schedule, at::Generator& gen);
/// Same objective with caller-supplied timesteps and noise.
torch::Tensor tcdm_loss(const NoisePredictor& model, const torch::Tensor& z0, const torch::Tensor& tlf,
                        const NoiseSchedule& schedule, const torch::Tensor& k, const torch::Tensor& noise);

/// Ascending 1-based timesteps visited by a `steps`-step sampler; always ends at T.
std::vector<int> sampling_timesteps(int total, int steps);

/// Deterministic DDIM (eta = 0) from N(0, I) noise drawn from `gen`, conditioned on the TLF at
/// every step. Accepts [C,m,n] or [B,C,m,n] conditioning.
LatentFeature sample(const NoisePredictor& model, const LatentFeature& tlf, int steps, const NoiseSchedule& schedule,
                     at::Generator& gen);
/// Same sampler started from a caller-supplied initial noise.
torch::Tensor sample_from(const NoisePredictor& model, const torch::Tensor& tlf, const torch::Tensor& initial_noise,
                          int steps, const NoiseSchedule& schedule);

NoisePredictor as_predictor(Denoiser& denoiser);

at::Generator make_generator(uint64_t seed);

}  // namespace metafe::diffusion
