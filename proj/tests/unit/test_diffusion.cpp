#include <cmath>

#include "doctest.h"
#include "metafe/diffusion.hpp"

using namespace metafe;
using namespace metafe::diffusion;

TEST_CASE("linear schedule") {
  auto s = NoiseSchedule::linear(1000);
  CHECK(s.steps == 1000);
  CHECK(s.betas[0].item<double>() == doctest::Approx(1e-4));
  CHECK(s.betas[999].item<double>() == doctest::Approx(0.02));
  CHECK(s.alpha_bar(0) == 1.0);
  double prod = 1.0;
  for (int k = 1; k <= 1000; ++k) prod *= 1.0 - s.betas[k - 1].item<double>();
  CHECK(s.alpha_bar(1000) == doctest::Approx(prod).epsilon(1e-12));
  CHECK_THROWS(s.alpha_bar(1001));
  CHECK_THROWS(NoiseSchedule::from_betas({0.5, 1.5}));
}

TEST_CASE("forward diffusion examples") {
  auto s = NoiseSchedule::from_betas({0.75});
  LatentFeature z0{torch::full({1}, 2.0, torch::kFloat64)};
  LatentFeature eps{torch::full({1}, 1.0, torch::kFloat64)};
  auto zk = forward_diffuse(z0, 1, eps, s);
  CHECK(zk.grid.item<double>() == doctest::Approx(0.5 * 2 + std::sqrt(0.75)).epsilon(1e-12));
  CHECK(zk.grid.item<double>() == doctest::Approx(1.8660).epsilon(1e-4));
  CHECK(torch::equal(forward_diffuse(z0, 0, eps, s).grid, z0.grid));
  CHECK_THROWS(forward_diffuse(z0, 2, eps, s));
  CHECK_THROWS(forward_diffuse(z0, -1, eps, s));
}

TEST_CASE("forward diffusion moments by Monte Carlo") {
  auto s = NoiseSchedule::linear(200);
  auto gen = make_generator(3);
  const double z = 1.5;
  for (int k : {1, 100, 200}) {
    auto noise = torch::randn({200000}, gen, torch::kFloat64);
    auto zk = forward_diffuse(torch::full({200000}, z, torch::kFloat64), torch::full({200000}, k, torch::kLong), noise, s);
    const double ab = s.alpha_bar(k);
    CHECK(zk.mean().item<double>() == doctest::Approx(std::sqrt(ab) * z).epsilon(0.03));
    CHECK(zk.var().item<double>() == doctest::Approx(1 - ab).epsilon(0.03));
  }
}

TEST_CASE("loss of a perfect and of a zero denoiser") {
  auto s = NoiseSchedule::linear(200);
  auto gen = make_generator(9);
  auto z0 = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
  auto tlf = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
  auto k = torch::randint(1, 201, {64}, gen, torch::kLong);
  auto noise = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
  // the stub recovers the injected noise from z_k, which is what the optimum would do
  NoisePredictor oracle = [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) { return noise; };
  CHECK(tcdm_loss(oracle, z0, tlf, s, k, noise).item<double>() == 0.0);
  NoisePredictor zero = [](const torch::Tensor& zk, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(zk);
  };
  CHECK(tcdm_loss(zero, z0, tlf, s, gen).item<double>() == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("sampling timesteps") {
  auto t = sampling_timesteps(1000, 50);
  CHECK(t.size() == 50);
  CHECK(t.back() == 1000);
  CHECK(std::is_sorted(t.begin(), t.end()));
  CHECK(sampling_timesteps(10, 10) == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
}

TEST_CASE("sampler is deterministic for a fixed generator") {
  torch::manual_seed(0);
  Denoiser net(DenoiserOptions{4, 16, 32});
  net->eval();
  torch::NoGradGuard guard;
  auto s = NoiseSchedule::linear(100);
  LatentFeature tlf{torch::randn({4, 8, 8}), LatentRole::Temporal};
  auto g1 = make_generator(42), g2 = make_generator(42);
  auto a = sample(as_predictor(net), tlf, 10, s, g1);
  auto b = sample(as_predictor(net), tlf, 10, s, g2);
  CHECK(torch::equal(a.grid, b.grid));
  CHECK(a.role == LatentRole::Diffusion);
  CHECK(a.grid.sizes() == torch::IntArrayRef{4, 8, 8});
}

TEST_CASE("DDIM with the exact noise oracle recovers z0") {
  // For z_T = sqrt(ab) z0 + sqrt(1-ab) eps with eps known, each deterministic DDIM step stays on the same line.
  auto s = NoiseSchedule::linear(100);
  auto gen = make_generator(1);
  auto z0 = torch::randn({2, 4, 8, 8}, gen, torch::kFloat64);
  auto eps = torch::randn({2, 4, 8, 8}, gen, torch::kFloat64);
  const double ab = s.alpha_bar(100);
  auto zt = std::sqrt(ab) * z0 + std::sqrt(1 - ab) * eps;
  NoisePredictor oracle = [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) { return eps; };
  auto out = sample_from(oracle, torch::zeros_like(z0), zt, 20, s);
  CHECK((out - z0).abs().max().item<double>() < 1e-9);
}

TEST_CASE("denoiser shapes and timestep embedding") {
  Denoiser net(DenoiserOptions{4, 16, 32});
  auto out = net->forward(torch::randn({3, 4, 8, 10}), torch::tensor({1, 50, 100}), torch::randn({3, 4, 8, 10}));
  CHECK(out.sizes() == torch::IntArrayRef{3, 4, 8, 10});
  auto e = timestep_embedding(torch::tensor({0, 5}), 32);
  CHECK(e.sizes() == torch::IntArrayRef{2, 32});
}
