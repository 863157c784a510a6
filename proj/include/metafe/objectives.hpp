#pragma once

#include <string>

#include "metafe/types.hpp"

namespace metafe::objectives {

/// L_all = L + kappa * (lambda1 * L_rs + lambda2 * L_ax + lambda3 * L_es).
struct LossConfig {
  double alpha = 0.85;  // SSIM weight in the photometric blend
  double kappa = 1.0;
  double lambda1 = 0.01;
  double lambda2 = 0.01;
  double lambda3 = 0.0001;

  void validate() const;
};

/// Local SSIM over 3x3 windows (reflection padded), [B,C,H,W] -> [B,C,H,W].
torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& y);

/// Per-pixel alpha * (1 - SSIM) / 2 + (1 - alpha) * |a - b|, channel mean: [B,1,H,W].
torch::Tensor photometric_map(const torch::Tensor& a, const torch::Tensor& b, double alpha);

/// Mean of a [B,1,H,W] map over pixels where mask is set. Throws on an empty mask.
torch::Tensor masked_mean(const torch::Tensor& map, const torch::Tensor& mask);

/// Inputs are [B,3,H,W] images and a [B,1,H,W] validity mask.
torch::Tensor photometric_loss(const torch::Tensor& target, const torch::Tensor& synth, const torch::Tensor& mask,
                               double alpha);

/// Smoothness of the appearance residual, weighted by exp(-|grad |target - synth||).
torch::Tensor residual_smoothness(const torch::Tensor& c_delta, const torch::Tensor& target,
                                  const torch::Tensor& synth);

/// Photometric function between `synth` and the residual-corrected `target + c_delta`, masked.
torch::Tensor auxiliary_loss(const torch::Tensor& synth, const torch::Tensor& target, const torch::Tensor& c_delta,
                             const torch::Tensor& mask, double alpha);

/// Edge-aware smoothness of a [B,1,H,W] disparity (mean-normalised) against image edges.
torch::Tensor edge_smoothness(const torch::Tensor& disparity, const torch::Tensor& image);

/// Edge-aware first-difference smoothness of a [B,2,H,W] flow field (no normalisation).
torch::Tensor flow_smoothness(const torch::Tensor& flow, const torch::Tensor& image);

struct LossParts {
  torch::Tensor photometric;
  torch::Tensor residual_smoothness;
  torch::Tensor auxiliary;
  torch::Tensor edge_smoothness;
};

/// Throws std::runtime_error naming the first non-finite term.
torch::Tensor total_loss(const LossParts& parts, const LossConfig& config);

}  // namespace metafe::objectives
