#pragma once

#include <string_view>

#include <torch/torch.h>

namespace metafe {

/// RGB image, `rgb` is [3,H,W] (or [B,3,H,W] in batched paths), intensities in [0,1].
struct Frame {
  torch::Tensor rgb;
  double timestamp = 0.0;

  int64_t height() const { return rgb.size(-2); }
  int64_t width() const { return rgb.size(-1); }
};

/// Per-pixel depth in mm, `values` is [H,W] (or [B,1,H,W] in batched paths).
struct DepthMap {
  torch::Tensor values;
};

enum class LatentRole { Spatial, Temporal, Diffusion, Meta, Concat };

constexpr std::string_view to_string(LatentRole role) {
  switch (role) {
    case LatentRole::Spatial: return "spatial";
    case LatentRole::Temporal: return "temporal";
    case LatentRole::Diffusion: return "diffusion";
    case LatentRole::Meta: return "meta";
    case LatentRole::Concat: return "concat";
  }
  return "unknown";
}

/// Latent grid [C,m,n] or [B,C,m,n] with m = H/8, n = W/8.
struct LatentFeature {
  torch::Tensor grid;
  LatentRole role = LatentRole::Spatial;
};

}  // namespace metafe
