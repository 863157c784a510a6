#include "metafe/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Geometry>

namespace metafe::geometry {

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d s;
  s << 0.0, -w.z(), w.y(),  //
      w.z(), 0.0, -w.x(),   //
      -w.y(), w.x(), 0.0;
  return s;
}

// Promotes depth to [B,1,H,W] and pose to [B,3,4].
std::pair<torch::Tensor, torch::Tensor> batched(const torch::Tensor& depth, const torch::Tensor& pose) {
  torch::Tensor d = depth;
  if (d.dim() == 2) d = d.unsqueeze(0).unsqueeze(0);
  else if (d.dim() == 3) d = d.unsqueeze(0);
  if (d.dim() != 4 || d.size(1) != 1) {
    throw std::invalid_argument("project_correspondence: depth must be [H,W], [1,H,W] or [B,1,H,W]");
  }
  torch::Tensor m = pose;
  if (m.dim() == 2) m = m.unsqueeze(0);
  if (m.dim() != 3 || m.size(1) != 3 || m.size(2) != 4) {
    throw std::invalid_argument("project_correspondence: pose must be [3,4] or [B,3,4]");
  }
  if (m.size(0) != d.size(0)) {
    if (m.size(0) == 1) m = m.expand({d.size(0), 3, 4});
    else throw std::invalid_argument("project_correspondence: batch size mismatch between depth and pose");
  }
  return {d, m.to(d.scalar_type())};
}

// Small slack so round-off on the border pixels of an identity projection does not drop them.
torch::Tensor in_bounds(const torch::Tensor& x, const torch::Tensor& y, int64_t width, int64_t height) {
  constexpr double slack = 1e-4;
  return (x >= -slack) & (x <= static_cast<double>(width - 1) + slack) & (y >= -slack) &
         (y <= static_cast<double>(height - 1) + slack);
}

}  // namespace

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("CameraIntrinsics: image size must be positive");
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
    throw std::invalid_argument("CameraIntrinsics: principal point outside the image");
  }
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Eigen::Matrix3d CameraIntrinsics::inverse_matrix() const {
  Eigen::Matrix3d k;
  k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
  return k;
}

CameraIntrinsics CameraIntrinsics::resized(int new_width, int new_height) const {
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  // Pixel centres map as (x + 0.5) * s - 0.5.
  return {fx * sx, fy * sy, (cx + 0.5) * sx - 0.5, (cy + 0.5) * sy - 0.5, new_width, new_height};
}

CameraIntrinsics CameraIntrinsics::default_for(int width, int height) {
  const double f = 0.8 * width;
  return {f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height};
}

Eigen::Matrix<double, 3, 4> Pose::matrix() const {
  Eigen::Matrix<double, 3, 4> m;
  m.leftCols<3>() = rotation;
  m.col(3) = translation;
  return m;
}

bool Pose::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

torch::Tensor Pose::to_tensor(torch::Dtype dtype) const {
  auto out = torch::empty({3, 4}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  const auto m = matrix();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) acc[r][c] = m(r, c);
  return out.to(dtype);
}

Pose Pose::from_tensor(const torch::Tensor& m34) {
  if (m34.dim() != 2 || m34.size(0) != 3 || m34.size(1) != 4) {
    throw std::invalid_argument("Pose::from_tensor expects a [3,4] tensor");
  }
  const auto m = m34.to(torch::kFloat64).contiguous();
  auto acc = m.accessor<double, 2>();
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = acc[r][c];
    p.translation(r) = acc[r][3];
  }
  return p;
}

Pose pose_from_params(const Eigen::Vector3d& axis_angle, const Eigen::Vector3d& translation) {
  Pose p;
  p.translation = translation;
  const double theta = axis_angle.norm();
  if (theta == 0.0) return p;
  const Eigen::Matrix3d k = skew(axis_angle / theta);
  p.rotation = Eigen::Matrix3d::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
  return p;
}

Pose pose_invert(const Pose& pose) {
  Pose inv;
  inv.rotation = pose.rotation.transpose();
  inv.translation = -(inv.rotation * pose.translation);
  return inv;
}

Pose pose_compose(const Pose& outer, const Pose& inner) {
  Pose out;
  out.rotation = outer.rotation * inner.rotation;
  out.translation = outer.rotation * inner.translation + outer.translation;
  return out;
}

Eigen::Vector3d rotation_log(const Eigen::Matrix3d& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

double rotation_distance(const Pose& a, const Pose& b) {
  return rotation_log(a.rotation.transpose() * b.rotation).norm();
}

torch::Tensor pose_matrix_from_params(const torch::Tensor& params) {
  if (params.dim() != 2 || params.size(1) != 6) {
    throw std::invalid_argument("pose_matrix_from_params expects [B,6]");
  }
  const auto b = params.size(0);
  auto w = params.narrow(1, 0, 3);
  auto t = params.narrow(1, 3, 3);
  // theta is offset by a tiny constant so the map stays differentiable at zero rotation.
  auto theta2 = (w * w).sum(1, true);
  auto theta = torch::sqrt(theta2 + 1e-12);
  auto a = torch::sin(theta) / theta;
  auto c = (1.0 - torch::cos(theta)) / (theta2 + 1e-12);
  // c -> 1/2 as theta -> 0; the guard above keeps the ratio finite but imprecise there.
  c = torch::where(theta2 < 1e-8, torch::full_like(c, 0.5) - theta2 / 24.0, c);
  auto zero = torch::zeros({b}, params.options());
  auto wx = w.select(1, 0), wy = w.select(1, 1), wz = w.select(1, 2);
  auto k = torch::stack({zero, -wz, wy, wz, zero, -wx, -wy, wx, zero}, 1).view({b, 3, 3});
  auto eye = torch::eye(3, params.options()).expand({b, 3, 3});
  auto rot = eye + a.view({b, 1, 1}) * k + c.view({b, 1, 1}) * torch::bmm(k, k);
  return torch::cat({rot, t.unsqueeze(2)}, 2);
}

PixelField project_correspondence(const CameraIntrinsics& intrinsics, const torch::Tensor& depth,
                                  const torch::Tensor& pose) {
  intrinsics.validate();
  auto [d, m] = batched(depth, pose);
  const auto bsz = d.size(0), h = d.size(2), w = d.size(3);
  if (h != intrinsics.height || w != intrinsics.width) {
    throw std::invalid_argument("project_correspondence: depth is " + std::to_string(w) + "x" + std::to_string(h) +
                                " but intrinsics are " + std::to_string(intrinsics.width) + "x" +
                                std::to_string(intrinsics.height));
  }
  if (!torch::isfinite(d).all().item<bool>() || !(d > 0).all().item<bool>()) {
    throw std::invalid_argument("project_correspondence: depth must be finite and strictly positive");
  }
  const auto opts = d.options();
  auto ys = torch::arange(h, opts);
  auto xs = torch::arange(w, opts);
  auto grid = torch::meshgrid({ys, xs}, "ij");
  // K^-1 h(p_t) with unit z.
  auto rx = (grid[1] - intrinsics.cx) / intrinsics.fx;
  auto ry = (grid[0] - intrinsics.cy) / intrinsics.fy;
  auto ray = torch::stack({rx, ry, torch::ones_like(rx)}, 0).view({1, 3, h * w});
  // M (D ray) / D = R ray + t / D; dividing through by the depth keeps the identity pose exact.
  auto rot = m.narrow(2, 0, 3);
  auto trans = m.narrow(2, 3, 1);
  auto moved = torch::matmul(rot, ray) + trans / d.view({bsz, 1, h * w});
  auto nz = moved.select(1, 2);
  auto z = nz * d.view({bsz, h * w});
  auto nz_safe = torch::where(z > 1e-9, nz, torch::ones_like(nz));
  // Displacement form: p + f (x'/z' - x), which is exactly p when the ray is unchanged.
  auto u = grid[1].reshape({1, h * w}) + intrinsics.fx * (moved.select(1, 0) / nz_safe - rx.reshape({1, h * w}));
  auto v = grid[0].reshape({1, h * w}) + intrinsics.fy * (moved.select(1, 1) / nz_safe - ry.reshape({1, h * w}));
  PixelField field;
  field.coords = torch::stack({u, v}, -1).view({bsz, h, w, 2});
  field.mask = ((z > 1e-9) & in_bounds(u, v, w, h)).view({bsz, 1, h, w});
  return field;
}

PixelField project_correspondence(const CameraIntrinsics& intrinsics, const DepthMap& depth, const Pose& pose) {
  return project_correspondence(intrinsics, depth.values, pose.to_tensor(depth.values.scalar_type()));
}

PixelField identity_field(int64_t batch, int64_t height, int64_t width, torch::TensorOptions options) {
  auto ys = torch::arange(height, options);
  auto xs = torch::arange(width, options);
  auto grid = torch::meshgrid({ys, xs}, "ij");
  PixelField field;
  field.coords = torch::stack({grid[1], grid[0]}, -1).unsqueeze(0).expand({batch, height, width, 2}).contiguous();
  field.mask = torch::ones({batch, 1, height, width}, options.dtype(torch::kBool));
  return field;
}

PixelField flow_field(const torch::Tensor& flow) {
  if (flow.dim() != 4 || flow.size(1) != 2) throw std::invalid_argument("flow_field expects [B,2,H,W]");
  const auto b = flow.size(0), h = flow.size(2), w = flow.size(3);
  auto base = identity_field(b, h, w, flow.options());
  PixelField field;
  field.coords = base.coords + flow.permute({0, 2, 3, 1});
  auto x = field.coords.select(3, 0), y = field.coords.select(3, 1);
  field.mask = in_bounds(x, y, w, h).unsqueeze(1);
  return field;
}

WarpResult inverse_warp(const torch::Tensor& source, const PixelField& field) {
  if (source.dim() != 4) throw std::invalid_argument("inverse_warp expects a [B,C,H,W] source");
  if (field.coords.dim() != 4 || field.coords.size(3) != 2) {
    throw std::invalid_argument("inverse_warp: field coords must be [B,H,W,2]");
  }
  const auto h = source.size(2), w = source.size(3);
  if (field.coords.size(0) != source.size(0) || field.coords.size(1) != h || field.coords.size(2) != w) {
    throw std::invalid_argument("inverse_warp: field resolution does not match the source");
  }
  // Bilinear gather in pixel units. At integer coordinates the fractional weights are exactly 0/1,
  // so identity fields reproduce the source bit-exactly (grid_sampler's [-1,1] rescale does not).
  auto coords = field.coords.to(source.scalar_type());
  auto x = coords.select(3, 0).clamp(0, static_cast<double>(w - 1));
  auto y = coords.select(3, 1).clamp(0, static_cast<double>(h - 1));
  auto x0 = x.detach().floor().clamp(0, static_cast<double>(std::max<int64_t>(w - 2, 0)));
  auto y0 = y.detach().floor().clamp(0, static_cast<double>(std::max<int64_t>(h - 2, 0)));
  auto fx = (x - x0).unsqueeze(1);
  auto fy = (y - y0).unsqueeze(1);
  auto ix0 = x0.to(torch::kLong), iy0 = y0.to(torch::kLong);
  auto ix1 = (ix0 + 1).clamp_max(w - 1), iy1 = (iy0 + 1).clamp_max(h - 1);
  const auto b = source.size(0), c = source.size(1);
  auto flat = source.reshape({b, c, h * w});
  auto gather = [&](const torch::Tensor& iy, const torch::Tensor& ix) {
    auto idx = (iy * w + ix).view({b, 1, h * w}).expand({b, c, h * w});
    return flat.gather(2, idx).view({b, c, h, w});
  };
  auto top = gather(iy0, ix0) * (1 - fx) + gather(iy0, ix1) * fx;
  auto bottom = gather(iy1, ix0) * (1 - fx) + gather(iy1, ix1) * fx;
  auto image = top * (1 - fy) + bottom * fy;
  return {image, field.mask};
}

Frame inverse_warp(const Frame& source, const PixelField& field) {
  auto rgb = source.rgb.dim() == 3 ? source.rgb.unsqueeze(0) : source.rgb;
  auto out = inverse_warp(rgb, field);
  return {source.rgb.dim() == 3 ? out.image.squeeze(0) : out.image, source.timestamp};
}

}  // namespace metafe::geometry
