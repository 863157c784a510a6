#include <Eigen/QR>
#include <random>

#include "doctest.h"
#include "metafe/analysis.hpp"
#include "support.hpp"

using namespace metafe;
using namespace metafe::analysis;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

Eigen::MatrixXd orthogonal(int n, uint64_t seed) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(n, n, seed));
  return qr.householderQ();
}

// Gram-matrix form of linear CKA (HSIC ratio), independent of the feature-space formula.
double cka_gram(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const auto n = x.rows();
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
  Eigen::MatrixXd k = h * x * x.transpose() * h, l = h * y * y.transpose() * h;
  return (k.cwiseProduct(l)).sum() / std::sqrt(k.cwiseProduct(k).sum() * l.cwiseProduct(l).sum());
}

}  // namespace

TEST_CASE("linear CKA properties") {
  auto x = gaussian(200, 12, 1);
  Eigen::MatrixXd y = gaussian(200, 9, 2) + x.leftCols(9) * 0.5;
  CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(linear_cka(x, y) == doctest::Approx(linear_cka(y, x)).epsilon(1e-12));
  CHECK(linear_cka(x, y) == doctest::Approx(cka_gram(x, y)).epsilon(1e-9));
  CHECK(std::abs(linear_cka(x, x * orthogonal(12, 3)) - 1.0) < 1e-6);
  CHECK(std::abs(linear_cka(x, y * orthogonal(9, 4)) - linear_cka(x, y)) < 1e-6);
  CHECK(std::abs(linear_cka(x * 7.5, y) - linear_cka(x, y)) < 1e-6);
  CHECK(linear_cka(gaussian(512, 16, 5), gaussian(512, 16, 6)) < 0.15);
  const double v = linear_cka(x, y);
  CHECK(v >= 0.0);
  CHECK(v <= 1.0);
}

TEST_CASE("linear CKA rejects degenerate input") {
  auto x = gaussian(10, 3, 1);
  CHECK_THROWS(linear_cka(x, gaussian(11, 3, 1)));
  CHECK_THROWS(linear_cka(x.topRows(1), x.topRows(1)));
  Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(10, 3, 2.0);
  CHECK_THROWS(linear_cka(x, flat));
}

TEST_CASE("PCA alignment") {
  auto x = gaussian(100, 6, 8);
  CHECK(linear_cka(pca_align(x, 6), x) == doctest::Approx(1.0).epsilon(1e-9));
  Eigen::MatrixXd y = gaussian(100, 5, 9) + x.leftCols(5);
  CHECK(std::abs(linear_cka(pca_align(x, 6), pca_align(y, 5)) - linear_cka(x, y)) < 1e-9);

  Eigen::VectorXd dir = Eigen::VectorXd::LinSpaced(4, 1, 4);
  Eigen::MatrixXd rank1 = gaussian(50, 1, 10) * dir.transpose();
  auto r = pca(rank1, 1);
  CHECK(r.explained_variance[0] == doctest::Approx(1.0).epsilon(1e-12));

  auto a = pca(x, 3), b = pca(x, 3);
  CHECK(a.projection == b.projection);
  CHECK_THROWS(pca(x, 7));
  CHECK_THROWS(pca(x.topRows(3), 4));
}

TEST_CASE("flattening puts positions in rows") {
  auto t = torch::arange(2 * 3 * 2 * 2, torch::kFloat32).view({2, 3, 2, 2});
  auto m = flatten_positions(t);
  CHECK(m.rows() == 8);
  CHECK(m.cols() == 3);
  // sample 1, position (1,0), channel 2
  CHECK(m(4 + 2, 2) == t[1][2][1][0].item<float>());
}

TEST_CASE("activation dump round trip") {
  auto dir = testing::scratch_dir("dump");
  ActivationDump d;
  d.label = "rgb";
  d.layers[0] = torch::randn({3, 4, 2, 2});
  d.layers[7] = torch::randn({3, 2, 4, 4});
  d.save(dir);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  auto r = ActivationDump::load(dir);
  CHECK(r.label == "rgb");
  CHECK(r.sample_count() == 3);
  REQUIRE(r.layers.size() == 2);
  CHECK(torch::equal(r.layers[0], d.layers[0]));
  CHECK(torch::equal(r.layers[7], d.layers[7]));
}

TEST_CASE("similarity grid") {
  torch::manual_seed(0);
  ActivationDump a;
  a.label = "a";
  a.layers[0] = torch::randn({6, 8, 4, 4});
  a.layers[1] = torch::randn({6, 4, 8, 8});
  a.layers[2] = torch::randn({6, 3, 8, 8});
  auto g = cka_grid(a, a, 4);
  REQUIRE(g.values.rows() == 3);
  for (int i = 0; i < 3; ++i) CHECK(g.values(i, i) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(g.values.minCoeff() >= 0.0);
  CHECK(g.values.maxCoeff() <= 1.0);
  CHECK(g.block_mean(1, 2) == doctest::Approx((g.values(1, 1) + g.values(1, 2) + g.values(2, 1) + g.values(2, 2)) / 4));
  auto g2 = cka_grid(a, a, 4);
  CHECK(g.values == g2.values);

  ActivationDump b = a;
  b.layers[0] = torch::randn({5, 8, 4, 4});
  CHECK_THROWS(cka_grid(a, b, 4));

  auto csv = g.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  auto dir = testing::scratch_dir("grid");
  write_heatmap(g, dir / "grid.png");
  CHECK(std::filesystem::file_size(dir / "grid.png") > 0);
}
