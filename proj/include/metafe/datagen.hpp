#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "metafe/geometry.hpp"
#include "metafe/types.hpp"

namespace metafe::datagen {

/// Per-frame multiplicative gain and additive bias drawn uniformly from these ranges.
struct BrightnessModel {
  double gain_min = 1.0;
  double gain_max = 1.0;
  double bias_min = 0.0;
  double bias_max = 0.0;
};

struct SceneConfig {
  int width = 64;
  int height = 64;
  double tube_radius = 12.0;   // mm
  double deformation = 0.15;   // relative amplitude of the low-frequency radius modulation
  uint64_t texture_seed = 1;
  /// Camera-to-world keyframes, spread evenly over the sequence. Empty: a random
  /// forward-moving trajectory is drawn from the scene seed.
  std::vector<geometry::Pose> trajectory;
  int frame_count = 64;
  BrightnessModel brightness;

  double speed = 0.5;          // mm per frame along the lumen, auto trajectories only
  double end_wall_distance = 45.0;  // mm past the last camera position
  double min_depth = 0.5;      // mm, rendered depths must lie in [min_depth, max_depth]
  double max_depth = 150.0;
  double light_power = 120.0;   // co-located point light, inverse-square falloff
  double ambient = 0.03;
  int supersample = 2;         // sub-pixel rays per axis for the colour

  void validate() const;
};

struct FrameSequence {
  std::vector<Frame> frames;
  std::vector<DepthMap> depths;
  std::vector<geometry::Pose> poses;  // camera-to-world
  geometry::CameraIntrinsics intrinsics;

  size_t size() const { return frames.size(); }
  /// M_{t->s}: maps points from camera t into camera s.
  geometry::Pose relative_pose(size_t target, size_t source) const;
  void validate() const;
};

/// Ray-casts a procedurally textured, deformed tube lit by a light at the camera centre.
/// Deterministic for a fixed (config, seed). Depth maps are z-depths of the pixel-centre rays.
/// Throws std::invalid_argument when the trajectory leaves the tube or depths fall outside the
/// configured range.
FrameSequence generate_scene(const SceneConfig& config, uint64_t seed);

/// clip(gain * I + bias) to [0,1].
Frame perturb_brightness(const Frame& frame, double gain, double bias);

/// Writes frame_%06d.png (8-bit), depth_%06d.png (16-bit, 0.01 mm units), poses.txt
/// (12 floats per row, row-major 3x4) and intrinsics.txt.
void write_dataset(const FrameSequence& sequence, const std::filesystem::path& directory);

/// Key/value intrinsics record shared by the writer and the loader.
void write_intrinsics(const geometry::CameraIntrinsics& intrinsics, const std::filesystem::path& file);
geometry::CameraIntrinsics read_intrinsics(const std::filesystem::path& file);

}  // namespace metafe::datagen
