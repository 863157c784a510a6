#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

namespace {

std::string indexed(const char* pattern, size_t i) {
  char name[64];
  std::snprintf(name, sizeof(name), pattern, i);
  return name;
}

SequenceInfo index_sequence(const fs::path& dir) {
  SequenceInfo info;
  info.directory = dir;
  info.intrinsics = datagen::read_intrinsics(dir / "intrinsics.txt");
  while (fs::exists(dir / indexed("frame_%06zu.png", info.frame_count))) ++info.frame_count;
  if (info.frame_count < 4) {
    throw std::runtime_error(dir.string() + ": sequence has " + std::to_string(info.frame_count) +
                             " frames, at least 4 are needed for a temporal window");
  }
  size_t stray = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("frame_", 0) == 0) ++stray;
  }
  if (stray != info.frame_count) {
    throw std::runtime_error(dir.string() + ": frame numbering has a gap after " +
                             (dir / indexed("frame_%06zu.png", info.frame_count - 1)).string());
  }
  size_t depths = 0;
  while (depths < info.frame_count && fs::exists(dir / indexed("depth_%06zu.png", depths))) ++depths;
  if (depths != 0 && depths != info.frame_count) {
    throw std::runtime_error("missing depth file " + (dir / indexed("depth_%06zu.png", depths)).string());
  }
  info.has_depth = depths == info.frame_count;
  info.has_poses = fs::exists(dir / "poses.txt");
  return info;
}

}  // namespace

DatasetIndex load_dataset(const fs::path& directory) {
  if (!fs::is_directory(directory)) throw std::runtime_error("dataset directory not found: " + directory.string());
  DatasetIndex index;
  index.root = directory;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("seq_", 0) == 0) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) dirs.push_back(directory);
  for (const auto& d : dirs) {
    auto info = index_sequence(d);
    if (info.has_poses && load_poses(d / "poses.txt").size() != info.frame_count) {
      throw std::runtime_error((d / "poses.txt").string() + ": pose count differs from frame count");
    }
    index.sequences.push_back(std::move(info));
  }
  return index;
}

Frame load_frame(const fs::path& png, int width, int height) {
  cv::Mat bgr = cv::imread(png.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read frame " + png.string());
  if (bgr.cols != width || bgr.rows != height) cv::resize(bgr, bgr, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {height, width, 3}, torch::kUInt8).permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
  return {t.contiguous(), 0.0};
}

DepthMap load_depth(const fs::path& png, int width, int height) {
  cv::Mat raw = cv::imread(png.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw std::runtime_error("cannot read depth " + png.string());
  if (raw.type() != CV_16UC1) throw std::runtime_error(png.string() + ": depth must be a 16-bit single-channel PNG");
  if (raw.cols != width || raw.rows != height) cv::resize(raw, raw, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  cv::Mat mm;
  raw.convertTo(mm, CV_64FC1, 0.01);
  auto t = torch::from_blob(mm.data, {height, width}, torch::kFloat64).clone();
  return {t};
}

std::vector<geometry::Pose> load_poses(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<geometry::Pose> poses;
  std::string line;
  size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream s(line);
    Eigen::Matrix<double, 3, 4> m;
    for (int i = 0; i < 12; ++i) {
      if (!(s >> m(i / 4, i % 4))) throw std::runtime_error(file.string() + ":" + std::to_string(row) + ": expected 12 numbers");
    }
    geometry::Pose p;
    p.rotation = m.leftCols<3>();
    p.translation = m.col(3);
    if (!p.is_valid(1e-5)) throw std::runtime_error(file.string() + ":" + std::to_string(row) + ": not a rigid transform");
    poses.push_back(p);
  }
  return poses;
}

SequenceData load_sequence(const SequenceInfo& info, int width, int height) {
  SequenceData data;
  std::vector<torch::Tensor> frames, depths;
  for (size_t i = 0; i < info.frame_count; ++i) {
    frames.push_back(load_frame(info.directory / indexed("frame_%06zu.png", i), width, height).rgb);
    if (info.has_depth) {
      depths.push_back(load_depth(info.directory / indexed("depth_%06zu.png", i), width, height).values.unsqueeze(0));
    }
  }
  data.frames = torch::stack(frames);
  if (info.has_depth) data.depths = torch::stack(depths);
  if (info.has_poses) data.poses = load_poses(info.directory / "poses.txt");
  data.intrinsics = info.intrinsics.resized(width, height);
  return data;
}

SplitPart split_part_from_string(std::string_view name) {
  if (name == "train") return SplitPart::Train;
  if (name == "val") return SplitPart::Val;
  if (name == "test") return SplitPart::Test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

Split split_sequences(size_t count, double train_fraction, double val_fraction, uint64_t seed) {
  std::vector<size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  size_t n_train = static_cast<size_t>(std::llround(train_fraction * count));
  size_t n_val = static_cast<size_t>(std::llround(val_fraction * count));
  if (count >= 3) {
    n_val = std::max<size_t>(n_val, val_fraction > 0.0 ? 1 : 0);
    n_train = std::clamp<size_t>(n_train, 1, count - n_val - 1);
  } else {
    n_train = count;
    n_val = 0;
  }
  Split s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

const std::vector<size_t>& part_of(const Split& split, SplitPart part) {
  switch (part) {
    case SplitPart::Train: return split.train;
    case SplitPart::Val: return split.val;
    case SplitPart::Test: return split.test;
  }
  throw std::invalid_argument("bad split part");
}

WindowStream::WindowStream(const DatasetIndex& index, std::vector<size_t> sequences, int width, int height,
                           uint64_t seed, bool shuffle)
    : index_(index), sequences_(std::move(sequences)), width_(width), height_(height), seed_(seed), shuffle_(shuffle) {
  for (auto s : sequences_) {
    if (s >= index_.sequences.size()) throw std::out_of_range("WindowStream: sequence index out of range");
  }
  if (shuffle_) {
    std::mt19937_64 rng(seed_);
    std::shuffle(sequences_.begin(), sequences_.end(), rng);
  }
}

void WindowStream::open_next_sequence() {
  current_ = sequences_[seq_pos_++];
  data_ = load_sequence(index_.sequences[current_], width_, height_);
  order_.resize(data_.size() - 3);
  std::iota(order_.begin(), order_.end(), size_t{3});
  if (shuffle_) {
    std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (current_ + 1)));
    std::shuffle(order_.begin(), order_.end(), rng);
  }
  order_pos_ = 0;
}

std::optional<Window> WindowStream::next() {
  while (order_pos_ >= order_.size()) {
    if (seq_pos_ >= sequences_.size()) return std::nullopt;
    open_next_sequence();
  }
  const size_t t = order_[order_pos_++];
  Window w;
  w.sequence = current_;
  w.t = t;
  for (size_t i = 0; i < 4; ++i) w.frames[i] = {data_.frames[t - 3 + i], static_cast<double>(t - 3 + i)};
  if (data_.depths.defined()) w.depth = DepthMap{data_.depths[t][0]};
  if (!data_.poses.empty()) w.pose = data_.poses[t];
  return w;
}

void generate_dataset(const DatagenPlan& plan, const fs::path& directory, std::ostream* progress) {
  plan.scene.validate();
  fs::create_directories(directory);
  for (int i = 0; i < plan.sequences; ++i) {
    datagen::SceneConfig scene = plan.scene;
    // A random trajectory occasionally grazes the wall; retry with the next seed.
    for (int attempt = 0;; ++attempt) {
      const uint64_t seed = plan.seed * 1000003ULL + static_cast<uint64_t>(i) * 101ULL + static_cast<uint64_t>(attempt);
      scene.texture_seed = seed;
      try {
        auto seq = datagen::generate_scene(scene, seed);
        datagen::write_dataset(seq, directory / indexed("seq_%03zu", static_cast<size_t>(i)));
        break;
      } catch (const std::invalid_argument& e) {
        if (attempt >= 20) throw;
        if (progress) *progress << "seq_" << i << ": retrying (" << e.what() << ")\n";
      }
    }
    if (progress) *progress << "generated sequence " << (i + 1) << "/" << plan.sequences << std::endl;
  }
}

}  // namespace metafe::pipeline
