#include "metafe/autoenc.hpp"

#include <stdexcept>

namespace metafe::autoenc {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor up2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

}  // namespace

const std::vector<LayerInfo>& decoder_layer_registry() {
  static const std::vector<LayerInfo> registry = [] {
    std::vector<LayerInfo> r;
    for (int i = 0; i < kDecoderLayers; ++i) {
      const ScaleGroup g = group_of(i);
      const int div = g == ScaleGroup::Deeper ? 4 : (g == ScaleGroup::Middle ? 2 : 1);
      const char* gname = g == ScaleGroup::Deeper ? "deeper" : (g == ScaleGroup::Middle ? "middle" : "shallow");
      r.push_back({i, g, div, std::string(gname) + "." + std::to_string(i)});
    }
    return r;
  }();
  return registry;
}

ScaleGroup group_of(int layer) {
  if (layer < 0 || layer >= kDecoderLayers) throw std::out_of_range("decoder layer index out of range");
  if (layer <= 6) return ScaleGroup::Deeper;
  if (layer <= 11) return ScaleGroup::Middle;
  return ScaleGroup::Shallow;
}

LatentDecoderImpl::LatentDecoderImpl(DecoderOptions options) : options_(options) {
  const auto [w0, w1, w2] = options_.widths;
  const int64_t in_ch[kDecoderLayers] = {options_.latent_channels, w0, w0, w0, w0, w0, w0, w0, w1, w1, w1, w1, w1, w2, w2};
  const int64_t out_ch[kDecoderLayers] = {w0, w0, w0, w0, w0, w0, w0, w1, w1, w1, w1, w1, w2, w2, options_.out_channels};
  for (int i = 0; i < kDecoderLayers; ++i) {
    convs_.push_back(register_module("layer" + std::to_string(i), conv3(in_ch[i], out_ch[i])));
  }
  if (options_.side_heads) {
    side_quarter_ = register_module("side_quarter", conv3(w0, options_.out_channels));
    side_half_ = register_module("side_half", conv3(w1, options_.out_channels));
  }
}

DecoderOutput LatentDecoderImpl::forward(const torch::Tensor& z, bool keep_activations) {
  if (z.dim() != 4 || z.size(1) != options_.latent_channels) {
    throw std::invalid_argument("LatentDecoder: expected [B," + std::to_string(options_.latent_channels) + ",m,n] latents");
  }
  DecoderOutput out;
  auto record = [&](const torch::Tensor& t) {
    if (keep_activations) out.activations.push_back(t);
    return t;
  };
  // Residual pairs: (first, second) layer indices within a scale group.
  auto res_block = [&](torch::Tensor h, int first) {
    auto a = record(torch::silu(convs_[first]->forward(h)));
    return record(torch::silu(h + convs_[first + 1]->forward(a)));
  };

  auto h = record(torch::silu(convs_[0]->forward(up2(z))));
  for (int first : {1, 3, 5}) h = res_block(h, first);
  if (options_.side_heads) out.side[0] = side_quarter_->forward(h);

  h = record(torch::silu(convs_[7]->forward(up2(h))));
  for (int first : {8, 10}) h = res_block(h, first);
  if (options_.side_heads) out.side[1] = side_half_->forward(h);

  h = record(torch::silu(convs_[12]->forward(up2(h))));
  h = record(torch::silu(convs_[13]->forward(h)));
  out.output = record(convs_[14]->forward(h));
  return out;
}

EncoderImpl::EncoderImpl(EncoderOptions options) {
  const auto [w0, w1, w2] = options.widths;
  body_ = register_module("body", torch::nn::Sequential(
      conv3(3, w0), torch::nn::SiLU(),
      conv3(w0, w1, 2), torch::nn::SiLU(),
      conv3(w1, w1), torch::nn::SiLU(),
      conv3(w1, w2, 2), torch::nn::SiLU(),
      conv3(w2, w2), torch::nn::SiLU(),
      conv3(w2, w2, 2), torch::nn::SiLU(),
      conv3(w2, w2), torch::nn::SiLU()));
  moments_ = register_module("moments", conv3(w2, 2 * options.latent_channels));
}

std::pair<torch::Tensor, torch::Tensor> EncoderImpl::forward(const torch::Tensor& images) {
  auto m = moments_->forward(body_->forward(images));
  auto parts = m.chunk(2, 1);
  return {parts[0], torch::clamp(parts[1], -30.0, 20.0)};
}

torch::Tensor gaussian_kl(const torch::Tensor& mean, const torch::Tensor& logvar) {
  return 0.5 * (mean * mean + torch::exp(logvar) - 1.0 - logvar).mean();
}

AutoencoderImpl::AutoencoderImpl(AutoencoderOptions options) : options_(options) {
  options_.encoder.latent_channels = options_.latent_channels;
  options_.decoder.latent_channels = options_.latent_channels;
  encoder_ = register_module("encoder", Encoder(options_.encoder));
  decoder_ = register_module("decoder", LatentDecoder(options_.decoder));
  latent_scale_ = register_buffer("latent_scale", torch::ones({1}));
}

void AutoencoderImpl::check_input(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3) throw std::invalid_argument("Autoencoder: expected [B,3,H,W] images");
  if (images.size(2) % kDownsample != 0 || images.size(3) % kDownsample != 0) {
    throw std::invalid_argument("Autoencoder: image size must be divisible by 8");
  }
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& images) {
  check_input(images);
  return encoder_->forward(images).first * latent_scale_;
}

torch::Tensor AutoencoderImpl::decode_rgb(const torch::Tensor& latents) {
  return torch::sigmoid(decoder_->forward(latents / latent_scale_).output);
}

DecoderOutput AutoencoderImpl::decode_rgb_activations(const torch::Tensor& latents) {
  return decoder_->forward(latents / latent_scale_, true);
}

VaeLoss AutoencoderImpl::loss(const torch::Tensor& images) {
  check_input(images);
  auto [mean, logvar] = encoder_->forward(images);
  auto z = mean + torch::exp(0.5 * logvar) * torch::randn_like(mean);
  auto recon = torch::sigmoid(decoder_->forward(z).output);
  VaeLoss l;
  l.reconstruction = F::mse_loss(recon, images);
  l.kl = gaussian_kl(mean, logvar);
  l.total = l.reconstruction + options_.kl_weight * l.kl;
  return l;
}

void AutoencoderImpl::fit_latent_scale(const torch::Tensor& images) {
  torch::NoGradGuard guard;
  check_input(images);
  auto mean = encoder_->forward(images).first;
  const double sd = mean.std().item<double>();
  latent_scale_.fill_(sd > 1e-8 ? 1.0 / sd : 1.0);
}

LatentFeature encode(Autoencoder& model, const Frame& frame) {
  auto x = frame.rgb.dim() == 3 ? frame.rgb.unsqueeze(0) : frame.rgb;
  auto z = model->encode(x);
  return {frame.rgb.dim() == 3 ? z.squeeze(0) : z, LatentRole::Spatial};
}

Frame decode_rgb(Autoencoder& model, const LatentFeature& z) {
  auto g = z.grid.dim() == 3 ? z.grid.unsqueeze(0) : z.grid;
  if (g.dim() != 4 || g.size(1) != model->options().latent_channels) {
    throw std::invalid_argument("decode_rgb: latent channel count mismatch");
  }
  auto img = model->decode_rgb(g);
  return {z.grid.dim() == 3 ? img.squeeze(0) : img, 0.0};
}

TemporalProjectionImpl::TemporalProjectionImpl(int64_t latent_channels, bool bias) : channels_(latent_channels) {
  proj_ = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * latent_channels, latent_channels, 1).bias(bias)));
  reset_to_average();
}

void TemporalProjectionImpl::reset_to_average() {
  torch::NoGradGuard guard;
  auto w = torch::zeros({channels_, 3 * channels_, 1, 1});
  for (int64_t o = 0; o < channels_; ++o)
    for (int k = 0; k < 3; ++k) w[o][k * channels_ + o][0][0] = 1.0 / 3.0;
  proj_->weight.copy_(w);
  if (proj_->bias.defined()) proj_->bias.zero_();
}

torch::Tensor TemporalProjectionImpl::forward(const torch::Tensor& z3, const torch::Tensor& z2, const torch::Tensor& z1) {
  if (!z3.sizes().equals(z2.sizes()) || !z3.sizes().equals(z1.sizes())) {
    throw std::invalid_argument("temporal_latent_feature: the three latents must share a shape");
  }
  if (z3.dim() != 4 || z3.size(1) != channels_) throw std::invalid_argument("temporal_latent_feature: expected [B,C,m,n]");
  return proj_->forward(torch::cat({z3, z2, z1}, 1));
}

LatentFeature temporal_latent_feature(TemporalProjection& projection, const LatentFeature& z3,
                                      const LatentFeature& z2, const LatentFeature& z1) {
  const bool single = z3.grid.dim() == 3;
  auto lift = [&](const LatentFeature& z) { return single ? z.grid.unsqueeze(0) : z.grid; };
  auto out = projection->forward(lift(z3), lift(z2), lift(z1));
  return {single ? out.squeeze(0) : out, LatentRole::Temporal};
}

}  // namespace metafe::autoenc
