#include "doctest.h"
#include "metafe/objectives.hpp"
#include "support.hpp"

using namespace metafe;
using namespace metafe::objectives;

namespace {

torch::Tensor ones_mask(int64_t h, int64_t w) { return torch::ones({1, 1, h, w}, torch::kBool); }

}  // namespace

TEST_CASE("photometric loss examples") {
  auto a = torch::rand({1, 3, 8, 8}, torch::kFloat64);
  CHECK(photometric_loss(a, a, ones_mask(8, 8), 0.85).item<double>() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(photometric_loss(a, a + 0.2, ones_mask(8, 8), 0.0).item<double>() == doctest::Approx(0.2).epsilon(1e-12));

  auto gen = torch::make_generator<at::CPUGeneratorImpl>(17);
  auto x = torch::randn({1, 1, 256, 256}, gen, torch::kFloat64);
  auto y = torch::randn({1, 1, 256, 256}, gen, torch::kFloat64);
  CHECK(photometric_loss(x, y, ones_mask(256, 256), 1.0).item<double>() == doctest::Approx(0.5).epsilon(0.05));

  CHECK_THROWS(photometric_loss(a, a, torch::zeros({1, 1, 8, 8}, torch::kBool), 0.85));
}

TEST_CASE("masked mean ignores invalid pixels") {
  auto map = torch::zeros({1, 1, 2, 2}, torch::kFloat64);
  map[0][0][0][0] = 4.0;
  map[0][0][1][1] = 100.0;
  auto mask = torch::zeros({1, 1, 2, 2}, torch::kBool);
  mask[0][0][0][0] = true;
  mask[0][0][0][1] = true;
  CHECK(masked_mean(map, mask).item<double>() == 2.0);
}

TEST_CASE("residual smoothness") {
  auto img = torch::rand({1, 3, 6, 6}, torch::kFloat64);
  CHECK(residual_smoothness(torch::full({1, 3, 6, 6}, 0.3, torch::kFloat64), img, img).item<double>() == 0.0);

  // unit step between columns 2 and 3, identical images so every weight is 1
  auto step = torch::zeros({1, 1, 6, 6}, torch::kFloat64);
  step.narrow(3, 3, 3).fill_(1.0);
  const double n = 6.0 * 5.0;  // horizontal differences per channel
  CHECK(residual_smoothness(step, img, img).item<double>() == doctest::Approx(6.0 / n).epsilon(1e-12));

  // growing disagreement gradient lowers the score
  auto synth = img.clone();
  double previous = residual_smoothness(step, img, synth).item<double>();
  for (double amp : {0.2, 0.5, 1.0}) {
    auto s = img.clone();
    s.narrow(3, 3, 3).add_(amp);
    const double v = residual_smoothness(step, img, s).item<double>();
    CHECK(v < previous);
    previous = v;
  }
}

TEST_CASE("auxiliary loss") {
  auto synth = torch::rand({1, 3, 5, 5}, torch::kFloat64);
  auto target = torch::rand({1, 3, 5, 5}, torch::kFloat64);
  CHECK(auxiliary_loss(synth, target, synth - target, ones_mask(5, 5), 0.85).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS(auxiliary_loss(synth, target, synth - target, torch::zeros({1, 1, 5, 5}, torch::kBool), 0.85));

  auto s = torch::full({1, 1, 1, 1}, 0.6, torch::kFloat64);
  auto t = torch::full({1, 1, 1, 1}, 0.5, torch::kFloat64);
  auto c = torch::full({1, 1, 1, 1}, 0.05, torch::kFloat64);
  CHECK(auxiliary_loss(s, t, c, ones_mask(1, 1), 0.0).item<double>() == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("edge-aware smoothness") {
  auto img = torch::full({1, 3, 6, 8}, 0.5, torch::kFloat64);
  CHECK(edge_smoothness(torch::full({1, 1, 6, 8}, 0.4, torch::kFloat64), img).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));
  // disp(x) = a + b x on a constant image: every horizontal step is b / mean(disp)
  const double a = 0.2, b = 0.05;
  auto ramp = (a + b * torch::arange(8, torch::kFloat64)).view({1, 1, 1, 8}).expand({1, 1, 6, 8}).contiguous();
  const double mean = a + b * 3.5;
  CHECK(edge_smoothness(ramp, img).item<double>() == doctest::Approx(b / mean).epsilon(1e-6));
}

TEST_CASE("total objective") {
  auto s = [](double v) { return torch::scalar_tensor(v, torch::kFloat64); };
  LossConfig cfg;
  CHECK(total_loss({s(0.1), s(1), s(2), s(10)}, cfg).item<double>() == doctest::Approx(0.131).epsilon(1e-12));
  CHECK(total_loss({s(0.3), s(0), s(0), s(0)}, cfg).item<double>() == 0.3);
  cfg.kappa = 0;
  CHECK(total_loss({s(0.1), s(5), s(6), s(7)}, cfg).item<double>() == 0.1);
  try {
    total_loss({s(0.1), s(NAN), s(0), s(0)}, LossConfig{});
    FAIL("non-finite term accepted");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("residual_smoothness") != std::string::npos);
  }
  LossConfig bad;
  bad.alpha = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("analytic gradients match finite differences") {
  torch::manual_seed(4);
  auto target = torch::rand({1, 3, 8, 8}, torch::kFloat64);
  auto synth = torch::rand({1, 3, 8, 8}, torch::kFloat64);
  auto mask = ones_mask(8, 8);
  mask[0][0][0][0] = false;
  const auto c0 = torch::rand({1, 3, 8, 8}, torch::kFloat64) * 0.2 - 0.1;
  const auto d0 = torch::rand({1, 1, 8, 8}, torch::kFloat64) * 0.8 + 0.1;

  CHECK(testing::gradient_error([&](const torch::Tensor& x) { return photometric_loss(target, x, mask, 0.85); }, synth) < 1e-5);
  CHECK(testing::gradient_error([&](const torch::Tensor& x) { return residual_smoothness(x, target, synth); }, c0) < 1e-5);
  CHECK(testing::gradient_error([&](const torch::Tensor& x) { return auxiliary_loss(synth, target, x, mask, 0.85); }, c0) < 1e-5);
  CHECK(testing::gradient_error([&](const torch::Tensor& x) { return edge_smoothness(x, target); }, d0) < 1e-5);
}
