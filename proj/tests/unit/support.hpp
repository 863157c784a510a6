#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <torch/torch.h>

namespace testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("metafe_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Largest relative error between the autograd gradient of `f` at `x` and central differences.
inline double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                             double h = 1e-6) {
  auto x = x0.clone().set_requires_grad(true);
  auto y = f(x);
  y.backward();
  auto analytic = x.grad().flatten();
  auto flat = x0.clone().flatten();
  double worst = 0.0;
  const double scale = std::max(1e-8, analytic.abs().max().item<double>());
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = flat.clone(), minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    torch::NoGradGuard guard;
    const double fd = (f(plus.view(x0.sizes())).item<double>() - f(minus.view(x0.sizes())).item<double>()) / (2 * h);
    const double err = std::abs(fd - analytic[i].item<double>()) / std::max(scale, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace testing
