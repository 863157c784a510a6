#include "metafe/cross_norm.hpp"

#include <stdexcept>

namespace metafe::crossnorm {

void CrossNormParams::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("CrossNormParams: epsilon must be positive");
}

BatchStats batch_stats(const torch::Tensor& z_hat_batch) {
  auto z = z_hat_batch.dim() == 3 ? z_hat_batch.unsqueeze(0) : z_hat_batch;
  if (z.dim() != 4 || z.numel() == 0) throw std::invalid_argument("batch_stats: expected a nonempty [B,C,m,n] batch");
  auto mu = z.mean({0, 2, 3});
  auto centred = z - mu.view({1, -1, 1, 1});
  auto sigma2 = (centred * centred).mean({0, 2, 3});
  return {mu, sigma2};
}

torch::Tensor cross_normalize(const torch::Tensor& z, const torch::Tensor& z_hat, const BatchStats& stats,
                              const torch::Tensor& gamma, double epsilon) {
  if (!z.sizes().equals(z_hat.sizes())) throw std::invalid_argument("cross_normalize: Z_t and Z^_t shapes differ");
  const int64_t channel_dim = z.dim() - 3;
  if (channel_dim < 0 || stats.mu.numel() != z.size(channel_dim)) {
    throw std::invalid_argument("cross_normalize: statistics do not match the channel count");
  }
  std::vector<int64_t> view(z.dim(), 1);
  view[channel_dim] = -1;
  auto mu = stats.mu.view(view).to(z.scalar_type());
  auto denom = torch::sqrt(stats.sigma2.view(view).to(z.scalar_type()) + epsilon);
  return (z - mu) / denom * gamma.to(z.scalar_type()) + z_hat;
}

LatentFeature cross_normalize(const LatentFeature& z, const LatentFeature& z_hat, const BatchStats& stats,
                              const CrossNormParams& params) {
  params.validate();
  auto gamma = torch::scalar_tensor(params.gamma, z.grid.options());
  return {cross_normalize(z.grid, z_hat.grid, stats, gamma, params.epsilon), LatentRole::Meta};
}

CrossNormImpl::CrossNormImpl(CrossNormParams params, int64_t channels, double momentum)
    : params_(params), momentum_(momentum) {
  params_.validate();
  auto g = torch::scalar_tensor(params_.gamma, torch::kFloat32);
  gamma_ = params_.learnable_gamma ? register_parameter("gamma", g) : register_buffer("gamma", g);
  running_mu_ = register_buffer("running_mu", torch::zeros({channels}));
  running_var_ = register_buffer("running_var", torch::ones({channels}));
  initialized_ = register_buffer("initialized", torch::zeros({1}));
}

torch::Tensor CrossNormImpl::forward(const torch::Tensor& z, const torch::Tensor& z_hat) {
  if (is_training()) {
    auto stats = batch_stats(z_hat.detach());
    {
      torch::NoGradGuard guard;
      if (initialized_.item<float>() == 0.0f) {
        running_mu_.copy_(stats.mu);
        running_var_.copy_(stats.sigma2);
        initialized_.fill_(1.0f);
      } else {
        running_mu_.mul_(1.0 - momentum_).add_(stats.mu, momentum_);
        running_var_.mul_(1.0 - momentum_).add_(stats.sigma2, momentum_);
      }
    }
    return cross_normalize(z, z_hat, stats, gamma_, params_.epsilon);
  }
  return cross_normalize(z, z_hat, running(), gamma_, params_.epsilon);
}

}  // namespace metafe::crossnorm
