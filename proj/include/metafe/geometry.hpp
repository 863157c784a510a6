#pragma once

#include <Eigen/Core>

#include "metafe/types.hpp"

namespace metafe::geometry {

/// Pinhole intrinsics in pixels.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Throws std::invalid_argument on zero/negative focal length or a principal point outside the image.
  void validate() const;
  Eigen::Matrix3d matrix() const;
  Eigen::Matrix3d inverse_matrix() const;
  /// Same field of view at another resolution.
  CameraIntrinsics resized(int new_width, int new_height) const;

  /// Endoscope-like default: focal length 0.8 W, centred principal point.
  static CameraIntrinsics default_for(int width, int height);
};

/// Rigid transform x -> rotation * x + translation (translation in mm).
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation * x + translation; }
  Eigen::Matrix<double, 3, 4> matrix() const;
  /// True when rotation is orthonormal with det +1 within `tol`.
  bool is_valid(double tol = 1e-6) const;
  /// [3,4] tensor of the given dtype.
  torch::Tensor to_tensor(torch::Dtype dtype = torch::kFloat32) const;
  static Pose from_tensor(const torch::Tensor& m34);
};

/// Rodrigues rotation from an axis-angle vector (radians) plus a translation.
Pose pose_from_params(const Eigen::Vector3d& axis_angle, const Eigen::Vector3d& translation);
Pose pose_invert(const Pose& pose);
/// outer ∘ inner, i.e. x -> outer(inner(x)).
Pose pose_compose(const Pose& outer, const Pose& inner);
/// Log map of the rotation part, returned as an axis-angle vector.
Eigen::Vector3d rotation_log(const Eigen::Matrix3d& rotation);
/// Geodesic angle between the rotations of two poses (radians).
double rotation_distance(const Pose& a, const Pose& b);

/// Differentiable batched Rodrigues: [B,6] (axis-angle, translation) -> [B,3,4].
torch::Tensor pose_matrix_from_params(const torch::Tensor& params);

/// Continuous source-pixel coordinates for every target pixel.
/// coords: [B,H,W,2] as (x, y); mask: [B,1,H,W] bool.
struct PixelField {
  torch::Tensor coords;
  torch::Tensor mask;
};

/// Back-projects every target pixel with its depth, moves it by `pose` (target -> source)
/// and re-projects with [K|0]. Depth is [H,W], [1,H,W] or [B,1,H,W]; pose is [3,4] or [B,3,4].
/// The mask is set where the transformed point has positive z and lands inside [0,W-1]x[0,H-1].
PixelField project_correspondence(const CameraIntrinsics& intrinsics, const torch::Tensor& depth,
                                  const torch::Tensor& pose);
PixelField project_correspondence(const CameraIntrinsics& intrinsics, const DepthMap& depth,
                                  const Pose& pose);

/// coords(p) = p, all valid.
PixelField identity_field(int64_t batch, int64_t height, int64_t width,
                          torch::TensorOptions options = torch::kFloat32);
/// coords(p) = p + flow(p) for flow [B,2,H,W]; mask marks in-bounds landings.
PixelField flow_field(const torch::Tensor& flow);

struct WarpResult {
  torch::Tensor image;  // [B,C,H,W]
  torch::Tensor mask;   // [B,1,H,W] bool
};

/// Bilinear sampling of `source` at `field`. Out-of-bounds samples are clamped to the border and
/// reported invalid in the mask. Differentiable in both the source values and the coordinates.
WarpResult inverse_warp(const torch::Tensor& source, const PixelField& field);
Frame inverse_warp(const Frame& source, const PixelField& field);

}  // namespace metafe::geometry
