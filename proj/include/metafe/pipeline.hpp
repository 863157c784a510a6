#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "metafe/analysis.hpp"
#include "metafe/autoenc.hpp"
#include "metafe/cross_norm.hpp"
#include "metafe/datagen.hpp"
#include "metafe/depthnets.hpp"
#include "metafe/diffusion.hpp"
#include "metafe/evalmetrics.hpp"
#include "metafe/objectives.hpp"

namespace metafe::pipeline {

namespace fs = std::filesystem;

enum class Stage { Vae, Diffusion, OfNet, Depth };
inline constexpr std::array<Stage, 4> kStages = {Stage::Vae, Stage::Diffusion, Stage::OfNet, Stage::Depth};
std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);

std::string_view to_string(depthnets::InitMode mode);
depthnets::InitMode init_mode_from_string(std::string_view name);

/// `steps > 0` replaces the epoch count with an exact number of optimizer steps.
/// `learning_rate > 0` overrides the run-wide rate for this stage only.
struct StageSchedule {
  int epochs = 1;
  int steps = 0;
  double learning_rate = 0.0;
};

/// Parameters for `generate-data`: `sequences` scenes of `scene.frame_count` frames each.
struct DatagenPlan {
  int sequences = 20;
  datagen::SceneConfig scene;
  uint64_t seed = 1;
};

struct RunConfig {
  std::string dataset;      // directory in the datagen layout
  std::string run_dir = "run";
  /// Directory whose checkpoints satisfy missing prerequisites (ablation cells share Phase 1).
  std::string upstream_dir;
  int width = 64;
  int height = 64;
  int batch_size = 16;
  double learning_rate = 1e-4;
  StageSchedule vae{30};
  StageSchedule diffusion{12};
  StageSchedule ofnet{20};
  StageSchedule depth{18};
  objectives::LossConfig loss;
  crossnorm::CrossNormParams cross_norm;
  depthnets::InitMode init_mode = depthnets::InitMode::Pretrained;
  bool cn_enabled = true;
  bool freeze_phase1 = true;
  uint64_t seed = 0;

  int latent_channels = 4;
  int diffusion_timesteps = 1000;
  int sampling_steps = 50;
  int denoiser_width = 64;
  double min_depth = depthnets::kDefaultMinDepth;
  double max_depth = depthnets::kDefaultMaxDepth;
  double eval_cap = evalmetrics::kDefaultCapMm;
  double flow_smoothness = 0.05;
  /// Fraction of the depth stage during which the depth decoder is held at its initialisation
  /// while the pose net and AF-Net start up.
  double pose_warmup = 0.1;
  double grad_clip = 10.0;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  int cka_samples = 256;
  int cka_dim = 64;
  int bootstrap_resamples = 2000;
  int workers = 1;
  DatagenPlan datagen;

  void validate() const;
  const StageSchedule& schedule(Stage stage) const;
  StageSchedule& schedule(Stage stage);
  double stage_learning_rate(Stage stage) const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const fs::path& file);
};

// ---------------------------------------------------------------------------------------------
// Dataset

struct SequenceInfo {
  fs::path directory;
  size_t frame_count = 0;
  bool has_depth = false;
  bool has_poses = false;
  geometry::CameraIntrinsics intrinsics;
};

struct DatasetIndex {
  fs::path root;
  std::vector<SequenceInfo> sequences;
};

/// Indexes `seq_*` subdirectories (or `directory` itself when it holds frames directly) and
/// validates them. Throws naming the offending path on missing frames, malformed intrinsics or
/// sequences shorter than four frames.
DatasetIndex load_dataset(const fs::path& directory);

/// RGB in [0,1], resized to width x height when needed.
Frame load_frame(const fs::path& png, int width, int height);
/// 16-bit PNG in 0.01 mm units; 0 marks invalid pixels. Nearest-neighbour resize.
DepthMap load_depth(const fs::path& png, int width, int height);
std::vector<geometry::Pose> load_poses(const fs::path& file);

/// One sequence fully in memory at the requested resolution.
struct SequenceData {
  torch::Tensor frames;  // [N,3,H,W]
  torch::Tensor depths;  // [N,1,H,W] mm, undefined without ground truth
  std::vector<geometry::Pose> poses;
  geometry::CameraIntrinsics intrinsics;

  size_t size() const { return static_cast<size_t>(frames.size(0)); }
};
SequenceData load_sequence(const SequenceInfo& info, int width, int height);

struct Split {
  std::vector<size_t> train;
  std::vector<size_t> val;
  std::vector<size_t> test;
};
enum class SplitPart { Train, Val, Test };
SplitPart split_part_from_string(std::string_view name);

/// Deterministic sequence-level split; every part gets at least one sequence when count >= 3.
Split split_sequences(size_t count, double train_fraction, double val_fraction, uint64_t seed);
const std::vector<size_t>& part_of(const Split& split, SplitPart part);

/// A TLF window: frames t-3..t of one sequence.
struct Window {
  size_t sequence = 0;
  size_t t = 0;
  std::array<Frame, 4> frames;
  std::optional<DepthMap> depth;
  std::optional<geometry::Pose> pose;
};

/// Streams windows sequence by sequence, holding one sequence in memory at a time. Order is
/// fixed by the seed (sequence order and window order inside each sequence).
class WindowStream {
 public:
  WindowStream(const DatasetIndex& index, std::vector<size_t> sequences, int width, int height, uint64_t seed,
               bool shuffle);
  std::optional<Window> next();

 private:
  void open_next_sequence();

  const DatasetIndex& index_;
  std::vector<size_t> sequences_;
  int width_;
  int height_;
  uint64_t seed_;
  bool shuffle_;
  size_t seq_pos_ = 0;
  size_t current_ = 0;
  SequenceData data_;
  std::vector<size_t> order_;
  size_t order_pos_ = 0;
};

/// Writes `plan.sequences` generated scenes as seq_000, seq_001, ...
void generate_dataset(const DatagenPlan& plan, const fs::path& directory, std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------------------------
// Checkpoints

/// SHA-1 of "blob <size>\0<content>", the object id git assigns to the same bytes.
std::string git_blob_hash(const fs::path& file);

struct CheckpointMeta {
  Stage stage = Stage::Vae;
  std::string content_hash;
  int steps = 0;
  double final_loss = 0.0;
  nlohmann::json config;
};

fs::path checkpoint_dir(const fs::path& run_dir, Stage stage);
/// Looks in config.run_dir first, then config.upstream_dir. Throws when neither has the stage.
fs::path find_checkpoint(const RunConfig& config, Stage stage);
CheckpointMeta read_meta(const fs::path& dir);

struct NamedModule {
  std::string name;
  std::shared_ptr<torch::nn::Module> module;
};

/// model.pt (all modules), optimizer.pt and meta.json holding the model hash.
void save_checkpoint(const fs::path& dir, Stage stage, const std::vector<NamedModule>& modules,
                     torch::optim::Optimizer* optimizer, const RunConfig& config, int steps, double final_loss);
/// Verifies the stored hash before loading. Returns the metadata.
CheckpointMeta load_checkpoint(const fs::path& dir, const std::vector<NamedModule>& modules);

// ---------------------------------------------------------------------------------------------
// Models

struct Phase1 {
  autoenc::Autoencoder vae{nullptr};
  autoenc::TemporalProjection tlf{nullptr};
  diffusion::Denoiser denoiser{nullptr};
  diffusion::NoiseSchedule schedule;
};

struct Phase2 {
  depthnets::DepthDecoder depth{nullptr};
  depthnets::PoseNet pose{nullptr};
  depthnets::AppearanceNet appearance{nullptr};
  crossnorm::CrossNorm cross_norm{nullptr};
};

autoenc::Autoencoder make_vae(const RunConfig& config);
Phase1 make_phase1(const RunConfig& config);
Phase2 make_phase2(const RunConfig& config);

/// Loads the VAE and the diffusion checkpoints found for `config`.
Phase1 load_phase1(const RunConfig& config);
depthnets::FlowNet load_flownet(const RunConfig& config);
Phase2 load_phase2(const RunConfig& config, const fs::path& depth_checkpoint);

/// Per-frame sampler seed so the sampled latent never depends on batching.
uint64_t frame_seed(uint64_t seed, size_t sequence, size_t t);

/// Encodes the four frames of each window and samples the diffusion latent for frame t.
struct WindowLatents {
  torch::Tensor z;      // [B,C,m,n] spatial latent of frame t
  torch::Tensor z_hat;  // [B,C,m,n] sampled diffusion latent
};
WindowLatents window_latents(Phase1& phase1, const torch::Tensor& windows, const std::vector<uint64_t>& seeds,
                             int sampling_steps);

/// Z*_t as fed to the depth decoder: cross-normalised when enabled, Ẑ_t otherwise.
torch::Tensor meta_feature(Phase2& phase2, const WindowLatents& latents, bool cn_enabled);

// ---------------------------------------------------------------------------------------------
// Training

/// Line-oriented log: "stage=<s> step=<n> term=<t> value=<v>".
class TrainingLog {
 public:
  explicit TrainingLog(const fs::path& file);
  void record(Stage stage, int step, std::string_view term, double value);

 private:
  std::ofstream out_;
};

struct StageResult {
  Stage stage = Stage::Vae;
  fs::path checkpoint;
  int steps = 0;
  double final_loss = 0.0;
};

/// Runs one stage. Later stages refuse to start without their prerequisite checkpoints; any
/// non-finite loss aborts with the stage and step named.
StageResult train_stage(Stage stage, const RunConfig& config);
std::vector<StageResult> train_all(const RunConfig& config);

// ---------------------------------------------------------------------------------------------
// Evaluation

struct FrameResult {
  size_t sequence = 0;
  size_t t = 0;
  evalmetrics::MetricReport metrics;
  evalmetrics::MetricReport baseline;  // constant median-depth prediction
};

struct EvaluationResult {
  evalmetrics::MetricReport report;
  evalmetrics::MetricReport baseline;
  std::vector<FrameResult> frames;
};

/// Predicted depth in mm, [B,1,H,W], for a batch of windows [B,4,3,H,W].
torch::Tensor predict_depth(Phase1& phase1, Phase2& phase2, const RunConfig& config, const torch::Tensor& windows,
                            const std::vector<uint64_t>& seeds);

/// Evaluates the depth checkpoint on every window of `part`. Writes per-frame and summary CSVs to
/// `report_dir` when it is not empty.
EvaluationResult evaluate(const RunConfig& config, const fs::path& depth_checkpoint, SplitPart part,
                          const fs::path& report_dir = {});

struct AblationRow {
  bool wp = false;
  bool cn = false;
  fs::path run_dir;
  EvaluationResult result;
};

/// The four WP x CN cells, ordered (on,on), (off,on), (on,off), (off,off). Phase 1 and the OF-Net
/// are trained once (or reused from config.run_dir); only the depth stage runs per cell, with the
/// same seed.
std::vector<AblationRow> ablate(const RunConfig& config);
std::string ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct CkaReport {
  analysis::SimilarityGrid depth_vs_rgb;
  analysis::SimilarityGrid depth_self;
  analysis::SimilarityGrid rgb_self;
  double deeper_mean = 0.0;  // layers 0-6 block of depth_vs_rgb
  double middle_mean = 0.0;  // layers 7-11 block
};

/// Dumps RGB-decoder activations (fed Z_t) and depth-decoder activations (fed Z*_t) on up to
/// config.cka_samples validation frames, then writes CSV grids and heatmaps to `out_dir`.
CkaReport analyze_cka(const RunConfig& config, const fs::path& depth_checkpoint, const fs::path& out_dir);

}  // namespace metafe::pipeline
