#pragma once

#include <array>
#include <string>
#include <vector>

#include "metafe/types.hpp"

namespace metafe::autoenc {

inline constexpr int kDownsample = 8;
inline constexpr int kDecoderLayers = 15;

enum class ScaleGroup { Deeper, Middle, Shallow };

/// One entry of the decoder activation registry.
struct LayerInfo {
  int index;
  ScaleGroup group;
  int scale_divisor;  // activation resolution is input / scale_divisor
  std::string name;
};

/// Layers 0-6 at 1/4 of the input resolution, 7-11 at 1/2, 12-14 at full resolution.
const std::vector<LayerInfo>& decoder_layer_registry();
ScaleGroup group_of(int layer);

struct DecoderOptions {
  int64_t latent_channels = 4;
  int64_t out_channels = 3;
  std::array<int64_t, 3> widths = {64, 32, 16};  // deeper, middle, shallow
  bool side_heads = false;                        // 1-channel outputs after layers 6 and 11
};

struct DecoderOutput {
  torch::Tensor output;                   // pre-squash head output at full resolution
  std::array<torch::Tensor, 2> side;      // pre-squash side-head outputs at 1/4 and 1/2 (if enabled)
  std::vector<torch::Tensor> activations; // 15 layer activations when requested
};

/// Convolutional decoder from the latent grid to full resolution with the fixed 15-layer graph.
/// Shared by the RGB decoder and the depth decoder; only the heads differ.
class LatentDecoderImpl : public torch::nn::Module {
 public:
  explicit LatentDecoderImpl(DecoderOptions options = {});

  DecoderOutput forward(const torch::Tensor& z, bool keep_activations = false);
  const DecoderOptions& options() const { return options_; }
  /// The 3x3 convolution behind registry layer `index`.
  torch::nn::Conv2d layer(int index) const { return convs_.at(index); }

 private:
  DecoderOptions options_;
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Conv2d side_quarter_{nullptr};
  torch::nn::Conv2d side_half_{nullptr};
};
TORCH_MODULE(LatentDecoder);

struct EncoderOptions {
  int64_t latent_channels = 4;
  std::array<int64_t, 3> widths = {16, 32, 64};
};

/// Image -> posterior mean and log-variance at 1/8 resolution.
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(EncoderOptions options = {});
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& images);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d moments_{nullptr};
};
TORCH_MODULE(Encoder);

struct AutoencoderOptions {
  int64_t latent_channels = 4;
  double kl_weight = 1e-6;
  EncoderOptions encoder;
  DecoderOptions decoder;
};

struct VaeLoss {
  torch::Tensor total;
  torch::Tensor reconstruction;
  torch::Tensor kl;
};

/// Latent autoencoder. Latents are exposed multiplied by a scale factor fitted after training so
/// they have roughly unit variance; decode_rgb undoes it.
class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(AutoencoderOptions options = {});

  /// Posterior mean, [B,3,H,W] -> [B,C,H/8,W/8]. H and W must be divisible by 8.
  torch::Tensor encode(const torch::Tensor& images);
  /// [B,C,m,n] -> image in [0,1].
  torch::Tensor decode_rgb(const torch::Tensor& latents);
  DecoderOutput decode_rgb_activations(const torch::Tensor& latents);

  /// Reconstruction (MSE) + kl_weight * KL against N(0, I), using a reparameterised sample.
  VaeLoss loss(const torch::Tensor& images);

  /// Sets the latent scale to 1 / std of the encoded batch.
  void fit_latent_scale(const torch::Tensor& images);
  double latent_scale() const { return latent_scale_.item<double>(); }

  LatentDecoder decoder() const { return decoder_; }
  Encoder encoder() const { return encoder_; }
  const AutoencoderOptions& options() const { return options_; }

 private:
  void check_input(const torch::Tensor& images) const;

  AutoencoderOptions options_;
  Encoder encoder_{nullptr};
  LatentDecoder decoder_{nullptr};
  torch::Tensor latent_scale_;
};
TORCH_MODULE(Autoencoder);

LatentFeature encode(Autoencoder& model, const Frame& frame);
Frame decode_rgb(Autoencoder& model, const LatentFeature& z);

/// KL(N(mean, exp(logvar)) || N(0, I)), averaged over elements.
torch::Tensor gaussian_kl(const torch::Tensor& mean, const torch::Tensor& logvar);

/// Linear map from the three preceding latents to the temporal latent feature:
/// concat along channels (3C) then a per-pixel 1x1 projection back to C.
class TemporalProjectionImpl : public torch::nn::Module {
 public:
  explicit TemporalProjectionImpl(int64_t latent_channels = 4, bool bias = false);

  /// Inputs [B,C,m,n] each, ordered t-3, t-2, t-1.
  torch::Tensor forward(const torch::Tensor& z3, const torch::Tensor& z2, const torch::Tensor& z1);
  /// Resets the weights to the average of the three inputs.
  void reset_to_average();
  torch::nn::Conv2d projection() const { return proj_; }

 private:
  int64_t channels_;
  torch::nn::Conv2d proj_{nullptr};
};
TORCH_MODULE(TemporalProjection);

LatentFeature temporal_latent_feature(TemporalProjection& projection, const LatentFeature& z3,
                                      const LatentFeature& z2, const LatentFeature& z1);

}  // namespace metafe::autoenc
