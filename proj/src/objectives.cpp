#include "metafe/objectives.hpp"

#include <stdexcept>

namespace metafe::objectives {

namespace F = torch::nn::functional;

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

torch::Tensor pool3(const torch::Tensor& x) { return F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(1)); }

torch::Tensor pad1(const torch::Tensor& x) {
  if (x.size(-1) > 1 && x.size(-2) > 1) return F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
  return F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
}

torch::Tensor grad_x(const torch::Tensor& t) { return t.narrow(3, 0, t.size(3) - 1) - t.narrow(3, 1, t.size(3) - 1); }
torch::Tensor grad_y(const torch::Tensor& t) { return t.narrow(2, 0, t.size(2) - 1) - t.narrow(2, 1, t.size(2) - 1); }

// sum over directions of mean(|grad v| * exp(-|grad g|)); `g` is a [B,1,H,W] guide.
torch::Tensor weighted_smoothness(const torch::Tensor& v, const torch::Tensor& g) {
  auto out = torch::zeros({}, v.options());
  if (v.size(3) > 1) out = out + (grad_x(v).abs() * torch::exp(-grad_x(g).abs())).mean();
  if (v.size(2) > 1) out = out + (grad_y(v).abs() * torch::exp(-grad_y(g).abs())).mean();
  return out;
}

}  // namespace

void LossConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("LossConfig: alpha must be in [0,1]");
  if (kappa < 0.0 || lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
    throw std::invalid_argument("LossConfig: loss weights must be non-negative");
  }
}

torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& y) {
  require_same(x, y, "ssim");
  auto xp = pad1(x), yp = pad1(y);
  auto mu_x = pool3(xp), mu_y = pool3(yp);
  auto sigma_x = pool3(xp * xp) - mu_x * mu_x;
  auto sigma_y = pool3(yp * yp) - mu_y * mu_y;
  auto sigma_xy = pool3(xp * yp) - mu_x * mu_y;
  auto num = (2 * mu_x * mu_y + kC1) * (2 * sigma_xy + kC2);
  auto den = (mu_x * mu_x + mu_y * mu_y + kC1) * (sigma_x + sigma_y + kC2);
  return num / den;
}

torch::Tensor photometric_map(const torch::Tensor& a, const torch::Tensor& b, double alpha) {
  require_same(a, b, "photometric_map");
  auto l1 = (a - b).abs().mean(1, true);
  if (alpha == 0.0) return l1;
  auto dssim = torch::clamp((1.0 - ssim(a, b)) / 2.0, 0.0, 1.0).mean(1, true);
  return alpha * dssim + (1.0 - alpha) * l1;
}

torch::Tensor masked_mean(const torch::Tensor& map, const torch::Tensor& mask) {
  auto m = mask.to(map.scalar_type());
  if (m.sizes() != map.sizes()) m = m.expand_as(map);
  auto count = m.sum();
  if (count.item<double>() <= 0.0) throw std::invalid_argument("empty validity mask (degenerate warp)");
  return (map * m).sum() / count;
}

torch::Tensor photometric_loss(const torch::Tensor& target, const torch::Tensor& synth, const torch::Tensor& mask,
                               double alpha) {
  return masked_mean(photometric_map(target, synth, alpha), mask);
}

torch::Tensor residual_smoothness(const torch::Tensor& c_delta, const torch::Tensor& target,
                                  const torch::Tensor& synth) {
  require_same(target, synth, "residual_smoothness");
  if (c_delta.size(2) != target.size(2) || c_delta.size(3) != target.size(3)) {
    throw std::invalid_argument("residual_smoothness: residual and images differ in resolution");
  }
  auto disagreement = (target - synth).abs().mean(1, true);
  return weighted_smoothness(c_delta, disagreement);
}

torch::Tensor auxiliary_loss(const torch::Tensor& synth, const torch::Tensor& target, const torch::Tensor& c_delta,
                             const torch::Tensor& mask, double alpha) {
  require_same(synth, target, "auxiliary_loss");
  require_same(target, c_delta, "auxiliary_loss");
  return masked_mean(photometric_map(synth, target + c_delta, alpha), mask);
}

torch::Tensor edge_smoothness(const torch::Tensor& disparity, const torch::Tensor& image) {
  if (disparity.size(2) != image.size(2) || disparity.size(3) != image.size(3)) {
    throw std::invalid_argument("edge_smoothness: disparity and image differ in resolution");
  }
  auto norm = disparity / (disparity.mean({2, 3}, true) + 1e-7);
  return weighted_smoothness(norm, image.mean(1, true));
}

torch::Tensor flow_smoothness(const torch::Tensor& flow, const torch::Tensor& image) {
  if (flow.size(2) != image.size(2) || flow.size(3) != image.size(3)) {
    throw std::invalid_argument("flow_smoothness: flow and image differ in resolution");
  }
  return weighted_smoothness(flow, image.mean(1, true));
}

torch::Tensor total_loss(const LossParts& parts, const LossConfig& config) {
  config.validate();
  const std::pair<const char*, const torch::Tensor*> named[] = {
      {"photometric", &parts.photometric},
      {"residual_smoothness", &parts.residual_smoothness},
      {"auxiliary", &parts.auxiliary},
      {"edge_smoothness", &parts.edge_smoothness}};
  for (const auto& [name, t] : named) {
    if (!t->defined()) throw std::runtime_error(std::string("total_loss: term '") + name + "' is undefined");
    if (!torch::isfinite(*t).all().item<bool>()) {
      throw std::runtime_error(std::string("total_loss: term '") + name + "' is not finite");
    }
  }
  auto reg = config.lambda1 * parts.residual_smoothness + config.lambda2 * parts.auxiliary +
             config.lambda3 * parts.edge_smoothness;
  return parts.photometric + config.kappa * reg;
}

}  // namespace metafe::objectives
