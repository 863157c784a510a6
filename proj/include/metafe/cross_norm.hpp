#pragma once

#include "metafe/types.hpp"

namespace metafe::crossnorm {

struct CrossNormParams {
  double gamma = 0.5;
  double epsilon = 1.0;
  bool learnable_gamma = false;

  void validate() const;
};

/// Per-channel mean and biased variance, shape [C].
struct BatchStats {
  torch::Tensor mu;
  torch::Tensor sigma2;
};

/// Statistics of a [B,C,m,n] (or [C,m,n]) batch over batch and spatial positions.
BatchStats batch_stats(const torch::Tensor& z_hat_batch);

/// (z - mu) / sqrt(sigma2 + eps) * gamma + z_hat, element-wise. `gamma` may be a tensor so it can
/// carry gradients.
torch::Tensor cross_normalize(const torch::Tensor& z, const torch::Tensor& z_hat, const BatchStats& stats,
                              const torch::Tensor& gamma, double epsilon);
LatentFeature cross_normalize(const LatentFeature& z, const LatentFeature& z_hat, const BatchStats& stats,
                              const CrossNormParams& params);

/// Cross normalization with running statistics for batch-size-1 inference.
class CrossNormImpl : public torch::nn::Module {
 public:
  explicit CrossNormImpl(CrossNormParams params = {}, int64_t channels = 4, double momentum = 0.1);

  /// Training mode: batch statistics of z_hat, folded into the running estimate.
  /// Eval mode: the running statistics.
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& z_hat);

  BatchStats running() const { return {running_mu_, running_var_}; }
  const CrossNormParams& params() const { return params_; }
  torch::Tensor gamma() const { return gamma_; }

 private:
  CrossNormParams params_;
  double momentum_;
  torch::Tensor gamma_;
  torch::Tensor running_mu_;
  torch::Tensor running_var_;
  torch::Tensor initialized_;
};
TORCH_MODULE(CrossNorm);

}  // namespace metafe::crossnorm
