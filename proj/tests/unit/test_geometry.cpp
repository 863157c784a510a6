#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "metafe/geometry.hpp"

using namespace metafe;
using namespace metafe::geometry;

namespace {

// Scalar pinhole chain, one pixel at a time, kept independent of the tensor path.
struct Reprojected {
  double x, y;
  bool valid;
};

Reprojected reproject_pixel(const CameraIntrinsics& k, double u, double v, double depth, const Pose& pose) {
  const double X = (u - k.cx) / k.fx * depth;
  const double Y = (v - k.cy) / k.fy * depth;
  const Eigen::Vector3d p = pose.apply({X, Y, depth});
  const double x = k.fx * p.x() / p.z() + k.cx;
  const double y = k.fy * p.y() / p.z() + k.cy;
  const bool valid = p.z() > 0 && x >= 0 && x <= k.width - 1 && y >= 0 && y <= k.height - 1;
  return {x, y, valid};
}

Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return pose_from_params({u(rng) * 2, u(rng) * 2, u(rng) * 2}, {u(rng) * 10, u(rng) * 10, u(rng) * 10});
}

}  // namespace

TEST_CASE("zero params give the identity pose") {
  auto p = pose_from_params(Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero());
  CHECK((p.rotation - Eigen::Matrix3d::Identity()).norm() == 0.0);
  CHECK(p.translation.norm() == 0.0);
}

TEST_CASE("quarter turn about z maps x onto y") {
  auto p = pose_from_params({0, 0, std::numbers::pi / 2}, Eigen::Vector3d::Zero());
  const Eigen::Vector3d y = p.apply({1, 0, 0});
  CHECK((y - Eigen::Vector3d(0, 1, 0)).norm() < 1e-9);
  CHECK(p.is_valid());
}

TEST_CASE("composition with the inverse is the identity") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    auto p = random_pose(rng);
    auto id = pose_compose(p, pose_invert(p));
    CHECK((id.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(id.translation.norm() < 1e-9);
    auto id2 = pose_compose(pose_invert(p), p);
    CHECK(id2.translation.norm() < 1e-9);
  }
}

TEST_CASE("rotation log inverts Rodrigues") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    Eigen::Vector3d w(u(rng), u(rng), u(rng));
    auto p = pose_from_params(w, Eigen::Vector3d::Zero());
    CHECK((rotation_log(p.rotation) - w).norm() < 1e-9);
  }
  auto a = pose_from_params({0, 0.3, 0}, Eigen::Vector3d::Zero());
  CHECK(rotation_distance(a, Pose::identity()) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("batched Rodrigues agrees with the Eigen path") {
  std::mt19937_64 rng(11);
  std::vector<Pose> poses;
  std::vector<double> params;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 8; ++i) {
    Eigen::Vector3d w(u(rng), u(rng), u(rng)), t(u(rng), u(rng), u(rng));
    if (i == 0) w.setZero();
    poses.push_back(pose_from_params(w, t));
    for (int j = 0; j < 3; ++j) params.push_back(w[j]);
    for (int j = 0; j < 3; ++j) params.push_back(t[j]);
  }
  auto m = pose_matrix_from_params(torch::tensor(params, torch::kFloat64).view({8, 6}));
  for (int i = 0; i < 8; ++i) {
    auto ref = poses[i].to_tensor(torch::kFloat64);
    CHECK((m[i] - ref).abs().max().item<double>() < 1e-12);
  }
}

TEST_CASE("pose tensor round trip") {
  std::mt19937_64 rng(5);
  auto p = random_pose(rng);
  auto q = Pose::from_tensor(p.to_tensor(torch::kFloat64));
  CHECK((p.rotation - q.rotation).norm() == 0.0);
  CHECK((p.translation - q.translation).norm() == 0.0);
}

TEST_CASE("intrinsics validation") {
  CameraIntrinsics k;
  k.fx = 0;
  CHECK_THROWS_AS(k.validate(), std::invalid_argument);
  auto d = CameraIntrinsics::default_for(64, 48);
  CHECK_NOTHROW(d.validate());
  auto r = d.resized(128, 96);
  CHECK(r.fx == doctest::Approx(2 * d.fx));
  CHECK(r.width == 128);
}

TEST_CASE("identity pose gives the identity field") {
  auto k = CameraIntrinsics::default_for(16, 12);
  auto depth = torch::rand({1, 1, 12, 16}, torch::kFloat64) * 20 + 1;
  auto field = project_correspondence(k, depth, Pose::identity().to_tensor(torch::kFloat64));
  auto ref = identity_field(1, 12, 16, torch::kFloat64);
  CHECK((field.coords - ref.coords).abs().max().item<double>() < 1e-12);
  CHECK(field.mask.all().item<bool>());
}

TEST_CASE("single-pixel translation example") {
  CameraIntrinsics k{1, 1, 0, 0, 1, 1};
  auto depth = torch::ones({1, 1, 1, 1}, torch::kFloat64);
  auto pose = pose_from_params(Eigen::Vector3d::Zero(), {0.5, 0, 0});
  auto field = project_correspondence(k, depth, pose.to_tensor(torch::kFloat64));
  CHECK(field.coords[0][0][0][0].item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(field.coords[0][0][0][1].item<double>() == doctest::Approx(0.0));
  auto ref = reproject_pixel(k, 0, 0, 1, pose);
  CHECK(ref.x == doctest::Approx(0.5));
}

TEST_CASE("points behind the camera are invalid") {
  CameraIntrinsics k{1, 1, 0, 0, 1, 1};
  auto depth = torch::ones({1, 1, 1, 1}, torch::kFloat64);
  auto pose = pose_from_params(Eigen::Vector3d::Zero(), {0, 0, -2});
  auto field = project_correspondence(k, depth, pose.to_tensor(torch::kFloat64));
  CHECK_FALSE(field.mask.any().item<bool>());
}

TEST_CASE("projection matches the scalar reference on random scenes") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto k = CameraIntrinsics::default_for(20, 16);
  auto depth = torch::rand({1, 1, 16, 20}, torch::kFloat64) * 30 + 5;
  auto pose = pose_from_params({u(rng) * 0.1, u(rng) * 0.1, u(rng) * 0.1}, {u(rng), u(rng), u(rng)});
  auto field = project_correspondence(k, depth, pose.to_tensor(torch::kFloat64));
  auto acc = depth.accessor<double, 4>();
  for (int v = 0; v < 16; ++v) {
    for (int x = 0; x < 20; ++x) {
      auto ref = reproject_pixel(k, x, v, acc[0][0][v][x], pose);
      CHECK(field.coords[0][v][x][0].item<double>() == doctest::Approx(ref.x).epsilon(1e-9));
      CHECK(field.coords[0][v][x][1].item<double>() == doctest::Approx(ref.y).epsilon(1e-9));
      CHECK(field.mask[0][0][v][x].item<bool>() == ref.valid);
    }
  }
}

TEST_CASE("projection rejects bad inputs") {
  auto k = CameraIntrinsics::default_for(8, 8);
  auto pose = Pose::identity().to_tensor(torch::kFloat64);
  auto depth = torch::ones({1, 1, 8, 8}, torch::kFloat64);
  depth[0][0][3][3] = 0.0;
  CHECK_THROWS(project_correspondence(k, depth, pose));
  CameraIntrinsics bad = k;
  bad.fx = 0;
  CHECK_THROWS(project_correspondence(bad, torch::ones({1, 1, 8, 8}, torch::kFloat64), pose));
}

TEST_CASE("identity warp reproduces the source exactly") {
  auto src = torch::rand({2, 3, 9, 11});
  auto out = inverse_warp(src, identity_field(2, 9, 11));
  CHECK(torch::equal(out.image, src));
  CHECK(out.mask.all().item<bool>());
}

TEST_CASE("bilinear sample between two pixels") {
  auto src = torch::tensor({10.0, 20.0}, torch::kFloat64).view({1, 1, 1, 2});
  auto field = identity_field(1, 1, 2, torch::kFloat64);
  field.coords[0][0][0][0] = 0.25;
  auto out = inverse_warp(src, field);
  CHECK(out.image[0][0][0][0].item<double>() == doctest::Approx(12.5).epsilon(1e-12));
}

TEST_CASE("constant image stays constant under any in-bounds field") {
  auto src = torch::full({1, 3, 8, 8}, 0.37, torch::kFloat64);
  auto field = identity_field(1, 8, 8, torch::kFloat64);
  field.coords = (field.coords + torch::rand_like(field.coords) * 3 - 1.5).clamp(0, 7);
  auto out = inverse_warp(src, field);
  CHECK((out.image - 0.37).abs().max().item<double>() < 1e-12);
}

TEST_CASE("flow field shifts by whole pixels and flags out-of-bounds") {
  auto src = torch::arange(16, torch::kFloat64).view({1, 1, 4, 4});
  auto flow = torch::zeros({1, 2, 4, 4}, torch::kFloat64);
  flow.select(1, 0).fill_(1.0);
  auto out = inverse_warp(src, flow_field(flow));
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 3; ++x) CHECK(out.image[0][0][y][x].item<double>() == src[0][0][y][x + 1].item<double>());
    CHECK_FALSE(out.mask[0][0][y][3].item<bool>());
  }
}

TEST_CASE("warp rejects mismatched resolutions") {
  auto src = torch::rand({1, 3, 8, 8});
  CHECK_THROWS(inverse_warp(src, identity_field(1, 6, 8)));
}
