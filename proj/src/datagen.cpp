#include "metafe/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include <ATen/Parallel.h>
#include <Eigen/Geometry>
#include <opencv2/imgcodecs.hpp>

namespace metafe::datagen {

namespace fs = std::filesystem;
using geometry::Pose;
using Eigen::Vector3d;

namespace {

// Improved gradient noise over R^3 with a seeded permutation table.
class GradientNoise {
 public:
  explicit GradientNoise(uint64_t seed) {
    std::array<int, 256> p{};
    std::iota(p.begin(), p.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(p.begin(), p.end(), rng);
    for (int i = 0; i < 512; ++i) perm_[i] = p[i & 255];
  }

  double operator()(double x, double y, double z) const {
    const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
    const int xi = static_cast<int>(fx) & 255, yi = static_cast<int>(fy) & 255, zi = static_cast<int>(fz) & 255;
    x -= fx;
    y -= fy;
    z -= fz;
    const double u = fade(x), v = fade(y), w = fade(z);
    const int a = perm_[xi] + yi, aa = perm_[a] + zi, ab = perm_[a + 1] + zi;
    const int b = perm_[xi + 1] + yi, ba = perm_[b] + zi, bb = perm_[b + 1] + zi;
    return lerp(w,
                lerp(v, lerp(u, grad(perm_[aa], x, y, z), grad(perm_[ba], x - 1, y, z)),
                     lerp(u, grad(perm_[ab], x, y - 1, z), grad(perm_[bb], x - 1, y - 1, z))),
                lerp(v, lerp(u, grad(perm_[aa + 1], x, y, z - 1), grad(perm_[ba + 1], x - 1, y, z - 1)),
                     lerp(u, grad(perm_[ab + 1], x, y - 1, z - 1), grad(perm_[bb + 1], x - 1, y - 1, z - 1))));
  }

  /// Band-limited sum of `octaves` octaves starting at `frequency` (cycles per mm).
  double fbm(const Vector3d& p, double frequency, int octaves) const {
    double sum = 0.0, amp = 1.0, norm = 0.0;
    for (int o = 0; o < octaves; ++o) {
      sum += amp * (*this)(p.x() * frequency, p.y() * frequency, p.z() * frequency);
      norm += amp;
      amp *= 0.5;
      frequency *= 2.0;
    }
    return sum / norm;
  }

 private:
  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
  static double lerp(double t, double a, double b) { return a + t * (b - a); }
  static double grad(int hash, double x, double y, double z) {
    const int h = hash & 15;
    const double u = h < 8 ? x : y;
    const double v = h < 4 ? y : (h == 12 || h == 14 ? x : z);
    return ((h & 1) ? -u : u) + ((h & 2) ? -v : v);
  }

  std::array<int, 512> perm_{};
};

struct Harmonic {
  double amplitude, angular, axial, phase;
};

// Deformed tube around the world z axis, closed by a flat wall at z = end_z.
class TubeScene {
 public:
  TubeScene(const SceneConfig& config, std::mt19937_64& rng, double end_z)
      : radius_(config.tube_radius), end_z_(end_z), texture_(config.texture_seed) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double remaining = config.deformation;
    for (int k = 0; k < 3; ++k) {
      const double amp = remaining * (k == 2 ? 1.0 : 0.3 + 0.4 * unit(rng));
      remaining -= amp;
      harmonics_.push_back({amp, static_cast<double>(k + 1), 0.04 + 0.12 * unit(rng),
                            2.0 * std::numbers::pi * unit(rng)});
    }
    bend_amp_ = 0.15 * radius_ * unit(rng);
    bend_freq_ = 0.02 + 0.03 * unit(rng);
    bend_phase_ = 2.0 * std::numbers::pi * unit(rng);
  }

  Eigen::Vector2d axis_at(double z) const {
    return {bend_amp_ * std::sin(bend_freq_ * z + bend_phase_),
            bend_amp_ * std::cos(0.7 * bend_freq_ * z + bend_phase_)};
  }

  double radius_at(double phi, double z) const {
    double r = 1.0;
    for (const auto& h : harmonics_) r += h.amplitude * std::sin(h.angular * phi + h.axial * z + h.phase);
    return radius_ * r;
  }

  /// Negative inside the lumen.
  double wall(const Vector3d& p) const {
    const Eigen::Vector2d c = axis_at(p.z());
    const double dx = p.x() - c.x(), dy = p.y() - c.y();
    return std::hypot(dx, dy) - radius_at(std::atan2(dy, dx), p.z());
  }

  double clearance(const Vector3d& p) const { return -wall(p); }
  double end_z() const { return end_z_; }

  Vector3d wall_normal(const Vector3d& p) const {
    constexpr double h = 1e-4;
    Vector3d g(wall(p + Vector3d(h, 0, 0)) - wall(p - Vector3d(h, 0, 0)),
               wall(p + Vector3d(0, h, 0)) - wall(p - Vector3d(0, h, 0)),
               wall(p + Vector3d(0, 0, h)) - wall(p - Vector3d(0, 0, h)));
    return g.normalized();
  }

  Vector3d albedo(const Vector3d& p) const {
    const double n = texture_.fbm(p, 0.12, 3);
    const double t = std::clamp(0.5 + 1.6 * n, 0.0, 1.0);
    // Thin dark ridges along zero crossings of a second noise field read as vessels.
    const double ridge = std::abs(texture_.fbm(p + Vector3d(31.7, 17.3, 5.1), 0.07, 2));
    const double r = std::clamp(ridge / 0.12, 0.0, 1.0);
    const double vessel = 1.0 - r * r * (3.0 - 2.0 * r);
    Vector3d c(0.40 + 0.55 * t, 0.12 + 0.50 * t, 0.10 + 0.40 * t);
    c.y() *= 1.0 - 0.65 * vessel;
    c.z() *= 1.0 - 0.55 * vessel;
    c.x() *= 1.0 - 0.45 * vessel;
    return c;
  }

 private:
  double radius_;
  double end_z_;
  GradientNoise texture_;
  std::vector<Harmonic> harmonics_;
  double bend_amp_ = 0.0, bend_freq_ = 0.0, bend_phase_ = 0.0;
};

struct Hit {
  double depth;  // z-depth in the camera frame
  Vector3d point;
  Vector3d normal;
};

// Sphere-traces origin + t * dir where dir has unit camera-frame z, so t is the z-depth.
Hit cast(const TubeScene& scene, const Vector3d& origin, const Vector3d& dir) {
  const double dir_norm = dir.norm();
  const double t_end = dir.z() > 1e-9 ? (scene.end_z() - origin.z()) / dir.z() : 1e9;
  double inside = 0.0;
  double t = 0.0;
  for (int it = 0; it < 2000; ++it) {
    const double probe = std::min(t, t_end);
    const double f = scene.wall(origin + probe * dir);
    if (f >= -1e-7) {
      double lo = inside, hi = probe;
      for (int b = 0; b < 50 && hi - lo > 1e-9; ++b) {
        const double mid = 0.5 * (lo + hi);
        (scene.wall(origin + mid * dir) < 0.0 ? lo : hi) = mid;
      }
      const Vector3d p = origin + hi * dir;
      return {hi, p, scene.wall_normal(p)};
    }
    if (probe >= t_end) break;
    inside = probe;
    // The radius modulation keeps |grad f| below 2, so a step of -f/2 stays inside; the
    // floor bounds the work on grazing rays and any overshoot is bisected above.
    t = probe + std::max(-f / (2.0 * dir_norm), 0.02);
  }
  return {t_end, origin + t_end * dir, Vector3d(0, 0, -1)};
}

Vector3d shade(const TubeScene& scene, const Hit& hit, const Vector3d& light, const SceneConfig& cfg) {
  const Vector3d to_light = light - hit.point;
  const double dist2 = to_light.squaredNorm();
  const double cos_term = std::abs(hit.normal.dot(to_light)) / std::sqrt(dist2);
  const double irradiance = cfg.ambient + cfg.light_power * cos_term / dist2;
  Vector3d c = scene.albedo(hit.point) * irradiance;
  for (int i = 0; i < 3; ++i) c[i] = std::pow(std::clamp(c[i], 0.0, 1.0), 1.0 / 2.2);
  return c;
}

Pose interpolate(const Pose& a, const Pose& b, double s) {
  Pose p;
  const Eigen::Quaterniond qa(a.rotation), qb(b.rotation);
  p.rotation = qa.slerp(s, qb).toRotationMatrix();
  p.translation = (1.0 - s) * a.translation + s * b.translation;
  return p;
}

std::vector<Pose> random_keyframes(const SceneConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  const int keys = std::max(2, cfg.frame_count / 8 + 1);
  const double span = cfg.speed * (cfg.frame_count - 1);
  std::vector<Pose> out;
  for (int k = 0; k < keys; ++k) {
    const double s = static_cast<double>(k) / (keys - 1);
    const Vector3d aa(0.1 * sym(rng), 0.1 * sym(rng), 0.15 * sym(rng));
    const Vector3d t(0.2 * cfg.tube_radius * sym(rng), 0.2 * cfg.tube_radius * sym(rng), s * span);
    out.push_back(geometry::pose_from_params(aa, t));
  }
  return out;
}

std::vector<Pose> expand_trajectory(const std::vector<Pose>& keys, int frames) {
  std::vector<Pose> poses;
  poses.reserve(frames);
  for (int i = 0; i < frames; ++i) {
    if (keys.size() == 1) {
      poses.push_back(keys.front());
      continue;
    }
    const double u = static_cast<double>(i) / std::max(1, frames - 1) * (keys.size() - 1);
    const size_t k = std::min(static_cast<size_t>(u), keys.size() - 2);
    poses.push_back(interpolate(keys[k], keys[k + 1], u - k));
  }
  return poses;
}

float quantize8(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace

void SceneConfig::validate() const {
  if (width <= 0 || height <= 0 || width % 4 != 0 || height % 4 != 0) {
    throw std::invalid_argument("SceneConfig: resolution must be positive and divisible by 4");
  }
  if (frame_count < 4) throw std::invalid_argument("SceneConfig: frame_count must be at least 4");
  if (!(tube_radius > 0.0)) throw std::invalid_argument("SceneConfig: tube_radius must be positive");
  if (deformation < 0.0 || deformation > 0.3) throw std::invalid_argument("SceneConfig: deformation must be in [0, 0.3]");
  if (!(min_depth > 0.0) || !(max_depth > min_depth) || max_depth > 150.0) {
    throw std::invalid_argument("SceneConfig: depth range must satisfy 0 < min_depth < max_depth <= 150");
  }
  if (brightness.gain_min <= 0.0 || brightness.gain_max < brightness.gain_min || brightness.bias_max < brightness.bias_min) {
    throw std::invalid_argument("SceneConfig: invalid brightness ranges");
  }
  if (supersample < 1) throw std::invalid_argument("SceneConfig: supersample must be >= 1");
  for (const auto& p : trajectory) {
    if (!p.is_valid()) throw std::invalid_argument("SceneConfig: trajectory keyframe is not a rigid transform");
  }
}

Pose FrameSequence::relative_pose(size_t target, size_t source) const {
  return geometry::pose_compose(geometry::pose_invert(poses.at(source)), poses.at(target));
}

void FrameSequence::validate() const {
  if (frames.size() != depths.size() || frames.size() != poses.size()) {
    throw std::invalid_argument("FrameSequence: frames, depths and poses differ in length");
  }
  for (const auto& d : depths) {
    if (!(d.values > 0).all().item<bool>()) throw std::invalid_argument("FrameSequence: depth must be positive");
  }
  for (const auto& p : poses) {
    if (!p.is_valid()) throw std::invalid_argument("FrameSequence: invalid pose");
  }
}

FrameSequence generate_scene(const SceneConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto keys = config.trajectory.empty() ? random_keyframes(config, rng) : config.trajectory;
  const auto poses = expand_trajectory(keys, config.frame_count);

  double max_z = -1e9;
  for (const auto& p : poses) max_z = std::max(max_z, p.translation.z());
  const TubeScene scene(config, rng, max_z + config.end_wall_distance);
  for (size_t i = 0; i < poses.size(); ++i) {
    if (scene.clearance(poses[i].translation) < 0.25 * config.tube_radius) {
      throw std::invalid_argument("SceneConfig: trajectory leaves the tube at frame " + std::to_string(i));
    }
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::pair<double, double>> brightness(poses.size());
  for (auto& [gain, bias] : brightness) {
    gain = config.brightness.gain_min + (config.brightness.gain_max - config.brightness.gain_min) * unit(rng);
    bias = config.brightness.bias_min + (config.brightness.bias_max - config.brightness.bias_min) * unit(rng);
  }

  FrameSequence seq;
  seq.intrinsics = geometry::CameraIntrinsics::default_for(config.width, config.height);
  seq.poses = poses;
  seq.frames.resize(poses.size());
  seq.depths.resize(poses.size());
  const auto& k = seq.intrinsics;
  const int w = config.width, h = config.height, ss = config.supersample;

  at::parallel_for(0, static_cast<int64_t>(poses.size()), 1, [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      const Pose& pose = poses[i];
      auto rgb = torch::empty({3, h, w}, torch::kFloat32);
      auto depth = torch::empty({h, w}, torch::kFloat32);
      auto rgb_a = rgb.accessor<float, 3>();
      auto depth_a = depth.accessor<float, 2>();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const Vector3d centre((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
          const Hit hit = cast(scene, pose.translation, pose.rotation * centre);
          depth_a[y][x] = static_cast<float>(hit.depth);
          Vector3d colour = Vector3d::Zero();
          for (int sy = 0; sy < ss; ++sy) {
            for (int sx = 0; sx < ss; ++sx) {
              const double px = x + (sx + 0.5) / ss - 0.5, py = y + (sy + 0.5) / ss - 0.5;
              const Vector3d d((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
              const Vector3d world_dir = pose.rotation * d;
              colour += shade(scene, cast(scene, pose.translation, world_dir), pose.translation, config);
            }
          }
          colour /= ss * ss;
          const auto [gain, bias] = brightness[i];
          for (int c = 0; c < 3; ++c) rgb_a[c][y][x] = quantize8(gain * colour[c] + bias);
        }
      }
      seq.frames[i] = Frame{rgb, static_cast<double>(i)};
      seq.depths[i] = DepthMap{depth};
    }
  });

  for (size_t i = 0; i < seq.depths.size(); ++i) {
    const auto& d = seq.depths[i].values;
    const double lo = d.min().item<double>(), hi = d.max().item<double>();
    if (lo < config.min_depth || hi > config.max_depth) {
      std::ostringstream msg;
      msg << "generate_scene: frame " << i << " depth range [" << lo << ", " << hi << "] mm outside configured ["
          << config.min_depth << ", " << config.max_depth << "]";
      throw std::invalid_argument(msg.str());
    }
  }
  return seq;
}

Frame perturb_brightness(const Frame& frame, double gain, double bias) {
  if (!(gain > 0.0)) throw std::invalid_argument("perturb_brightness: gain must be positive");
  return {torch::clamp(frame.rgb * gain + bias, 0.0, 1.0), frame.timestamp};
}

void write_intrinsics(const geometry::CameraIntrinsics& k, const fs::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(17);
  out << "fx " << k.fx << "\nfy " << k.fy << "\ncx " << k.cx << "\ncy " << k.cy << "\nwidth " << k.width
      << "\nheight " << k.height << "\n";
}

geometry::CameraIntrinsics read_intrinsics(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("missing intrinsics file: " + file.string());
  geometry::CameraIntrinsics k;
  int seen = 0;
  std::string key;
  double value = 0.0;
  while (in >> key) {
    if (!(in >> value)) throw std::runtime_error("malformed intrinsics record in " + file.string());
    if (key == "fx") k.fx = value;
    else if (key == "fy") k.fy = value;
    else if (key == "cx") k.cx = value;
    else if (key == "cy") k.cy = value;
    else if (key == "width") k.width = static_cast<int>(value);
    else if (key == "height") k.height = static_cast<int>(value);
    else throw std::runtime_error("unknown intrinsics field '" + key + "' in " + file.string());
    ++seen;
  }
  if (seen != 6) throw std::runtime_error("intrinsics record in " + file.string() + " must have 6 fields");
  try {
    k.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(file.string() + ": " + e.what());
  }
  return k;
}

void write_dataset(const FrameSequence& sequence, const fs::path& directory) {
  sequence.validate();
  fs::create_directories(directory);
  char name[64];
  for (size_t i = 0; i < sequence.size(); ++i) {
    auto rgb = sequence.frames[i].rgb.clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
    // CHW RGB -> HWC BGR for OpenCV.
    auto bgr = rgb.flip({0}).permute({1, 2, 0}).contiguous();
    cv::Mat img(static_cast<int>(bgr.size(0)), static_cast<int>(bgr.size(1)), CV_8UC3, bgr.data_ptr<uint8_t>());
    std::snprintf(name, sizeof(name), "frame_%06zu.png", i);
    if (!cv::imwrite((directory / name).string(), img)) throw std::runtime_error("failed to write " + std::string(name));

    auto d = sequence.depths[i].values.to(torch::kFloat64).mul(100.0).round().clamp(0, 65535).to(torch::kInt32);
    auto d16 = d.to(torch::kInt32).contiguous();
    cv::Mat depth(static_cast<int>(d16.size(0)), static_cast<int>(d16.size(1)), CV_32SC1, d16.data_ptr<int32_t>());
    cv::Mat depth_u16;
    depth.convertTo(depth_u16, CV_16UC1);
    std::snprintf(name, sizeof(name), "depth_%06zu.png", i);
    if (!cv::imwrite((directory / name).string(), depth_u16)) throw std::runtime_error("failed to write " + std::string(name));
  }
  std::ofstream poses(directory / "poses.txt");
  poses << std::setprecision(17);
  for (const auto& p : sequence.poses) {
    const auto m = p.matrix();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) poses << m(r, c) << ((r == 2 && c == 3) ? '\n' : ' ');
  }
  write_intrinsics(sequence.intrinsics, directory / "intrinsics.txt");
}

}  // namespace metafe::datagen
