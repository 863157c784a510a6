#include "metafe/depthnets.hpp"

#include <stdexcept>

namespace metafe::depthnets {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

void zero_(torch::nn::Conv2d& c) {
  torch::NoGradGuard guard;
  c->weight.zero_();
  if (c->bias.defined()) c->bias.zero_();
}

torch::Tensor squash(const torch::Tensor& x) {
  return torch::sigmoid(x).clamp(kDisparityFloor, 1.0 - kDisparityFloor);
}

torch::Tensor normalize_input(const torch::Tensor& x) { return (x - 0.45) / 0.225; }

// Both frames plus their amplified difference. Without the explicit difference channel the
// motion networks barely leave the zero-motion solution within a short schedule.
torch::Tensor pair_input(const torch::Tensor& a, const torch::Tensor& b) {
  return torch::cat({normalize_input(a), normalize_input(b), (a - b) * 10.0}, 1);
}

void check_range(double d_min, double d_max) {
  if (!(d_min > 0.0) || !(d_max > d_min)) throw std::invalid_argument("depth range must satisfy 0 < d_min < d_max");
}

torch::Tensor batch_of(const Frame& f) { return f.rgb.dim() == 3 ? f.rgb.unsqueeze(0) : f.rgb; }

}  // namespace

double disparity_to_depth(double disp, double d_min, double d_max) {
  check_range(d_min, d_max);
  if (!(disp > 0.0 && disp < 1.0)) throw std::invalid_argument("disparity must lie strictly inside (0,1)");
  return 1.0 / (disp * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max);
}

double depth_to_disparity(double depth, double d_min, double d_max) {
  check_range(d_min, d_max);
  return (1.0 / depth - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max);
}

torch::Tensor disparity_to_depth(const torch::Tensor& disp, double d_min, double d_max) {
  check_range(d_min, d_max);
  return 1.0 / (disp * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max);
}

DepthDecoderImpl::DepthDecoderImpl(autoenc::DecoderOptions rgb_options) {
  rgb_options.out_channels = 1;
  rgb_options.side_heads = true;
  body_ = register_module("body", autoenc::LatentDecoder(rgb_options));
}

DisparityPyramid DepthDecoderImpl::forward(const torch::Tensor& z_star) {
  auto out = body_->forward(z_star);
  return {{squash(out.side[0]), squash(out.side[1]), squash(out.output)}};
}

autoenc::DecoderOutput DepthDecoderImpl::forward_activations(const torch::Tensor& z_star) {
  return body_->forward(z_star, true);
}

void DepthDecoderImpl::initialize_from(autoenc::LatentDecoder& rgb, InitMode mode) {
  if (mode == InitMode::Scratch) return;
  const auto& ro = rgb->options();
  const auto& mo = body_->options();
  if (ro.widths != mo.widths || ro.latent_channels != mo.latent_channels) {
    throw std::invalid_argument("DepthDecoder::initialize_from: decoder graphs differ");
  }
  torch::NoGradGuard guard;
  for (int i = 0; i < autoenc::kDecoderLayers - 1; ++i) {
    auto dst = body_->layer(i);
    auto src = rgb->layer(i);
    dst->weight.copy_(src->weight);
    dst->bias.copy_(src->bias);
  }
  auto head = body_->layer(autoenc::kDecoderLayers - 1);
  auto rgb_head = rgb->layer(autoenc::kDecoderLayers - 1);
  head->weight.copy_(rgb_head->weight.mean(0, true));
  head->bias.copy_(rgb_head->bias.mean(0, true));
  if (mode == InitMode::FrozenDeeper) {
    for (int i = 0; i <= 6; ++i) {
      for (auto& p : body_->layer(i)->parameters()) p.set_requires_grad(false);
    }
  }
}

DisparityPyramid decode_depth(DepthDecoder& decoder, const LatentFeature& z_star) {
  auto z = z_star.grid.dim() == 3 ? z_star.grid.unsqueeze(0) : z_star.grid;
  return decoder->forward(z);
}

PoseNetImpl::PoseNetImpl(double output_scale) : scale_(output_scale) {
  body_ = register_module("body", torch::nn::Sequential(
      conv3(9, 16, 2), torch::nn::ReLU(),
      conv3(16, 32, 2), torch::nn::ReLU(),
      conv3(32, 64, 2), torch::nn::ReLU(),
      conv3(64, 128, 2), torch::nn::ReLU(),
      conv3(128, 128, 2), torch::nn::ReLU(),
      conv3(128, 128, 2), torch::nn::ReLU()));
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(128, 6, 1)));
  zero_(head_);
}

torch::Tensor PoseNetImpl::forward(const torch::Tensor& target, const torch::Tensor& source) {
  if (!target.sizes().equals(source.sizes())) throw std::invalid_argument("PoseNet: frames differ in shape");
  auto x = pair_input(target, source);
  return head_->forward(body_->forward(x)).mean({2, 3}) * scale_;
}

geometry::Pose estimate_pose(PoseNet& net, const Frame& target, const Frame& source) {
  torch::NoGradGuard guard;
  auto params = net->forward(batch_of(target), batch_of(source));
  return geometry::Pose::from_tensor(geometry::pose_matrix_from_params(params.to(torch::kFloat64))[0]);
}

EncoderDecoderImpl::EncoderDecoderImpl(int64_t in_channels, int64_t out_channels) {
  const int64_t widths[4] = {16, 32, 64, 96};
  enc_.push_back(register_module("enc0", conv3(in_channels, widths[0])));
  for (int i = 1; i < 4; ++i) enc_.push_back(register_module("enc" + std::to_string(i), conv3(widths[i - 1], widths[i], 2)));
  for (int i = 3; i >= 1; --i) {
    dec_.push_back(register_module("dec" + std::to_string(i), conv3(widths[i] + widths[i - 1], widths[i - 1])));
  }
  head_ = register_module("head", conv3(widths[0], out_channels));
  zero_(head_);
}

torch::Tensor EncoderDecoderImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (auto& c : enc_) {
    h = torch::elu(c->forward(h));
    skips.push_back(h);
  }
  for (size_t i = 0; i < dec_.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    auto up = F::interpolate(h, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                    .mode(torch::kNearest));
    h = torch::elu(dec_[i]->forward(torch::cat({up, skip}, 1)));
  }
  return head_->forward(h);
}

FlowNetImpl::FlowNetImpl() { net_ = register_module("net", EncoderDecoder(9, 2)); }

torch::Tensor FlowNetImpl::forward(const torch::Tensor& source, const torch::Tensor& target) {
  if (!target.sizes().equals(source.sizes())) throw std::invalid_argument("FlowNet: frames differ in shape");
  return net_->forward(pair_input(source, target));
}

torch::Tensor estimate_flow(FlowNet& net, const Frame& source, const Frame& target) {
  torch::NoGradGuard guard;
  return net->forward(batch_of(source), batch_of(target));
}

AppearanceNetImpl::AppearanceNetImpl() { net_ = register_module("net", EncoderDecoder(8, 3)); }

torch::Tensor AppearanceNetImpl::forward(const torch::Tensor& synth, const torch::Tensor& target,
                                         const torch::Tensor& flow) {
  if (!synth.sizes().equals(target.sizes()) || flow.size(2) != synth.size(2) || flow.size(3) != synth.size(3)) {
    throw std::invalid_argument("AppearanceNet: input shapes differ");
  }
  auto x = torch::cat({normalize_input(synth), normalize_input(target), flow}, 1);
  return torch::tanh(net_->forward(x));
}

torch::Tensor appearance_residual(AppearanceNet& net, const Frame& synth, const Frame& target,
                                  const torch::Tensor& flow) {
  torch::NoGradGuard guard;
  return net->forward(batch_of(synth), batch_of(target), flow.dim() == 3 ? flow.unsqueeze(0) : flow);
}

torch::Tensor upsample_to(const torch::Tensor& map, int64_t height, int64_t width) {
  if (map.size(2) == height && map.size(3) == width) return map;
  return F::interpolate(map, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

}  // namespace metafe::depthnets
