#pragma once

#include <array>

#include "metafe/autoenc.hpp"
#include "metafe/geometry.hpp"
#include "metafe/types.hpp"

namespace metafe::depthnets {

inline constexpr double kDefaultMinDepth = 0.1;   // mm
inline constexpr double kDefaultMaxDepth = 150.0; // mm
inline constexpr double kDisparityFloor = 1e-6;

/// Normalised inverse depth at 1/4, 1/2 and full resolution, each [B,1,h,w], values in (0,1).
struct DisparityPyramid {
  std::array<torch::Tensor, 3> scales;
  const torch::Tensor& full() const { return scales[2]; }
};

enum class InitMode { Scratch, Pretrained, FrozenDeeper };

/// 1 / (disp * (1/d_min - 1/d_max) + 1/d_max). Throws unless 0 < disp < 1 and 0 < d_min < d_max.
double disparity_to_depth(double disp, double d_min = kDefaultMinDepth, double d_max = kDefaultMaxDepth);
double depth_to_disparity(double depth, double d_min = kDefaultMinDepth, double d_max = kDefaultMaxDepth);
/// Tensor form; only checks the range bounds, values are assumed inside (0,1).
torch::Tensor disparity_to_depth(const torch::Tensor& disp, double d_min = kDefaultMinDepth,
                                 double d_max = kDefaultMaxDepth);

/// Depth decoder: the RGB decoder graph with 1-channel heads at every scale.
class DepthDecoderImpl : public torch::nn::Module {
 public:
  explicit DepthDecoderImpl(autoenc::DecoderOptions rgb_options = {});

  DisparityPyramid forward(const torch::Tensor& z_star);
  autoenc::DecoderOutput forward_activations(const torch::Tensor& z_star);

  /// Copies layers 0-13 from the RGB decoder; the 1-channel head takes the channel mean of the
  /// RGB head. FrozenDeeper additionally disables gradients on layers 0-6.
  void initialize_from(autoenc::LatentDecoder& rgb, InitMode mode);
  autoenc::LatentDecoder body() const { return body_; }

 private:
  autoenc::LatentDecoder body_{nullptr};
};
TORCH_MODULE(DepthDecoder);

DisparityPyramid decode_depth(DepthDecoder& decoder, const LatentFeature& z_star);

/// Strided encoder over the concatenated pair -> 6-vector (axis-angle, translation).
class PoseNetImpl : public torch::nn::Module {
 public:
  explicit PoseNetImpl(double output_scale = 0.01);
  /// [B,3,H,W] x2 -> [B,6] pose parameters for M_{t->s}.
  torch::Tensor forward(const torch::Tensor& target, const torch::Tensor& source);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d head_{nullptr};
  double scale_;
};
TORCH_MODULE(PoseNet);

geometry::Pose estimate_pose(PoseNet& net, const Frame& target, const Frame& source);

/// Four-level encoder-decoder with a zero-initialised output head.
class EncoderDecoderImpl : public torch::nn::Module {
 public:
  EncoderDecoderImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::vector<torch::nn::Conv2d> enc_;
  std::vector<torch::nn::Conv2d> dec_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(EncoderDecoder);

/// Optical flow from target pixels into the source: [B,2,H,W] displacements in pixels.
class FlowNetImpl : public torch::nn::Module {
 public:
  FlowNetImpl();
  torch::Tensor forward(const torch::Tensor& source, const torch::Tensor& target);

 private:
  EncoderDecoder net_{nullptr};
};
TORCH_MODULE(FlowNet);

torch::Tensor estimate_flow(FlowNet& net, const Frame& source, const Frame& target);

/// Appearance residual C_delta from (synthesized frame, target, flow), bounded by tanh to [-1,1].
class AppearanceNetImpl : public torch::nn::Module {
 public:
  AppearanceNetImpl();
  torch::Tensor forward(const torch::Tensor& synth, const torch::Tensor& target, const torch::Tensor& flow);

 private:
  EncoderDecoder net_{nullptr};
};
TORCH_MODULE(AppearanceNet);

torch::Tensor appearance_residual(AppearanceNet& net, const Frame& synth, const Frame& target,
                                  const torch::Tensor& flow);

/// Upsamples a [B,1,h,w] map to [B,1,H,W] bilinearly.
torch::Tensor upsample_to(const torch::Tensor& map, int64_t height, int64_t width);

}  // namespace metafe::depthnets
