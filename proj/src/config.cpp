#include <set>
#include <stdexcept>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

using nlohmann::json;

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::Vae: return "vae";
    case Stage::Diffusion: return "diffusion";
    case Stage::OfNet: return "ofnet";
    case Stage::Depth: return "depth";
  }
  return "unknown";
}

Stage stage_from_string(std::string_view name) {
  for (auto s : kStages) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

std::string_view to_string(depthnets::InitMode mode) {
  switch (mode) {
    case depthnets::InitMode::Pretrained: return "wp";
    case depthnets::InitMode::Scratch: return "scratch";
    case depthnets::InitMode::FrozenDeeper: return "fw";
  }
  return "unknown";
}

depthnets::InitMode init_mode_from_string(std::string_view name) {
  if (name == "wp") return depthnets::InitMode::Pretrained;
  if (name == "scratch") return depthnets::InitMode::Scratch;
  if (name == "fw") return depthnets::InitMode::FrozenDeeper;
  throw std::invalid_argument("unknown init mode '" + std::string(name) + "' (expected wp, scratch or fw)");
}

namespace {

// Reads keys of one JSON object and rejects anything it was not asked about.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument(where_ + ": unknown key '" + key + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json schedule_json(const StageSchedule& s) {
  return {{"epochs", s.epochs}, {"steps", s.steps}, {"learning_rate", s.learning_rate}};
}

void read_schedule(const json& j, StageSchedule& s, const std::string& where) {
  Reader r(j, where);
  r.get("epochs", s.epochs);
  r.get("steps", s.steps);
  r.get("learning_rate", s.learning_rate);
}

json scene_json(const datagen::SceneConfig& s) {
  return {{"width", s.width},
          {"height", s.height},
          {"tube_radius", s.tube_radius},
          {"deformation", s.deformation},
          {"frame_count", s.frame_count},
          {"speed", s.speed},
          {"end_wall_distance", s.end_wall_distance},
          {"min_depth", s.min_depth},
          {"max_depth", s.max_depth},
          {"light_power", s.light_power},
          {"ambient", s.ambient},
          {"supersample", s.supersample},
          {"gain", {s.brightness.gain_min, s.brightness.gain_max}},
          {"bias", {s.brightness.bias_min, s.brightness.bias_max}}};
}

void read_scene(const json& j, datagen::SceneConfig& s) {
  Reader r(j, "datagen.scene");
  r.get("width", s.width);
  r.get("height", s.height);
  r.get("tube_radius", s.tube_radius);
  r.get("deformation", s.deformation);
  r.get("frame_count", s.frame_count);
  r.get("speed", s.speed);
  r.get("end_wall_distance", s.end_wall_distance);
  r.get("min_depth", s.min_depth);
  r.get("max_depth", s.max_depth);
  r.get("light_power", s.light_power);
  r.get("ambient", s.ambient);
  r.get("supersample", s.supersample);
  std::array<double, 2> gain{s.brightness.gain_min, s.brightness.gain_max};
  std::array<double, 2> bias{s.brightness.bias_min, s.brightness.bias_max};
  r.get("gain", gain);
  r.get("bias", bias);
  s.brightness = {gain[0], gain[1], bias[0], bias[1]};
}

}  // namespace

void RunConfig::validate() const {
  if (width <= 0 || height <= 0 || width % autoenc::kDownsample || height % autoenc::kDownsample) {
    throw std::invalid_argument("RunConfig: resolution must be positive and divisible by 8");
  }
  if (batch_size < 1) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("RunConfig: learning_rate must be positive");
  for (auto s : kStages) {
    if (schedule(s).epochs < 1) throw std::invalid_argument("RunConfig: " + std::string(to_string(s)) + " epochs must be >= 1");
    if (schedule(s).steps < 0) throw std::invalid_argument("RunConfig: " + std::string(to_string(s)) + " steps must be >= 0");
    if (!(schedule(s).learning_rate >= 0.0)) {
      throw std::invalid_argument("RunConfig: " + std::string(to_string(s)) + " learning_rate must be >= 0");
    }
  }
  loss.validate();
  cross_norm.validate();
  if (latent_channels < 1) throw std::invalid_argument("RunConfig: latent_channels must be >= 1");
  if (diffusion_timesteps < 1) throw std::invalid_argument("RunConfig: diffusion_timesteps must be >= 1");
  if (sampling_steps < 1 || sampling_steps > diffusion_timesteps) {
    throw std::invalid_argument("RunConfig: sampling_steps must be in [1, diffusion_timesteps]");
  }
  if (denoiser_width < 8 || denoiser_width % 8) throw std::invalid_argument("RunConfig: denoiser_width must be a multiple of 8");
  if (!(min_depth > 0.0) || !(max_depth > min_depth)) throw std::invalid_argument("RunConfig: need 0 < min_depth < max_depth");
  if (!(eval_cap > 0.0)) throw std::invalid_argument("RunConfig: eval_cap must be positive");
  if (flow_smoothness < 0.0 || !(grad_clip > 0.0)) throw std::invalid_argument("RunConfig: invalid flow_smoothness or grad_clip");
  if (!(pose_warmup >= 0.0 && pose_warmup < 1.0)) throw std::invalid_argument("RunConfig: pose_warmup must be in [0, 1)");
  if (!(train_fraction > 0.0) || val_fraction < 0.0 || train_fraction + val_fraction >= 1.0) {
    throw std::invalid_argument("RunConfig: split fractions must leave room for a test part");
  }
  if (cka_samples < 2 || cka_dim < 1) throw std::invalid_argument("RunConfig: cka_samples >= 2 and cka_dim >= 1 required");
  if (bootstrap_resamples < 1) throw std::invalid_argument("RunConfig: bootstrap_resamples must be >= 1");
  if (workers < 1) throw std::invalid_argument("RunConfig: workers must be >= 1");
  if (datagen.sequences < 1) throw std::invalid_argument("RunConfig: datagen.sequences must be >= 1");
  datagen.scene.validate();
}

const StageSchedule& RunConfig::schedule(Stage stage) const {
  switch (stage) {
    case Stage::Vae: return vae;
    case Stage::Diffusion: return diffusion;
    case Stage::OfNet: return ofnet;
    case Stage::Depth: return depth;
  }
  throw std::invalid_argument("bad stage");
}

StageSchedule& RunConfig::schedule(Stage stage) {
  return const_cast<StageSchedule&>(static_cast<const RunConfig&>(*this).schedule(stage));
}

double RunConfig::stage_learning_rate(Stage stage) const {
  const double lr = schedule(stage).learning_rate;
  return lr > 0.0 ? lr : learning_rate;
}

json RunConfig::to_json() const {
  return {{"dataset", dataset},
          {"run_dir", run_dir},
          {"upstream_dir", upstream_dir},
          {"width", width},
          {"height", height},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"schedule",
           {{"vae", schedule_json(vae)},
            {"diffusion", schedule_json(diffusion)},
            {"ofnet", schedule_json(ofnet)},
            {"depth", schedule_json(depth)}}},
          {"loss",
           {{"alpha", loss.alpha},
            {"kappa", loss.kappa},
            {"lambda1", loss.lambda1},
            {"lambda2", loss.lambda2},
            {"lambda3", loss.lambda3}}},
          {"cross_norm",
           {{"gamma", cross_norm.gamma},
            {"epsilon", cross_norm.epsilon},
            {"learnable_gamma", cross_norm.learnable_gamma}}},
          {"init_mode", std::string(to_string(init_mode))},
          {"cn_enabled", cn_enabled},
          {"freeze_phase1", freeze_phase1},
          {"seed", seed},
          {"latent_channels", latent_channels},
          {"diffusion_timesteps", diffusion_timesteps},
          {"sampling_steps", sampling_steps},
          {"denoiser_width", denoiser_width},
          {"min_depth", min_depth},
          {"max_depth", max_depth},
          {"eval_cap", eval_cap},
          {"flow_smoothness", flow_smoothness},
          {"pose_warmup", pose_warmup},
          {"grad_clip", grad_clip},
          {"train_fraction", train_fraction},
          {"val_fraction", val_fraction},
          {"cka_samples", cka_samples},
          {"cka_dim", cka_dim},
          {"bootstrap_resamples", bootstrap_resamples},
          {"workers", workers},
          {"datagen", {{"sequences", datagen.sequences}, {"seed", datagen.seed}, {"scene", scene_json(datagen.scene)}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Reader r(j, "config");
  r.get("dataset", c.dataset);
  r.get("run_dir", c.run_dir);
  r.get("upstream_dir", c.upstream_dir);
  r.get("width", c.width);
  r.get("height", c.height);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  if (const json* s = r.child("schedule")) {
    Reader rs(*s, "schedule");
    for (auto stage : kStages) {
      if (const json* e = rs.child(std::string(to_string(stage)).c_str())) {
        read_schedule(*e, c.schedule(stage), "schedule." + std::string(to_string(stage)));
      }
    }
  }
  if (const json* l = r.child("loss")) {
    Reader rl(*l, "loss");
    rl.get("alpha", c.loss.alpha);
    rl.get("kappa", c.loss.kappa);
    rl.get("lambda1", c.loss.lambda1);
    rl.get("lambda2", c.loss.lambda2);
    rl.get("lambda3", c.loss.lambda3);
  }
  if (const json* n = r.child("cross_norm")) {
    Reader rn(*n, "cross_norm");
    rn.get("gamma", c.cross_norm.gamma);
    rn.get("epsilon", c.cross_norm.epsilon);
    rn.get("learnable_gamma", c.cross_norm.learnable_gamma);
  }
  std::string mode(to_string(c.init_mode));
  r.get("init_mode", mode);
  c.init_mode = init_mode_from_string(mode);
  r.get("cn_enabled", c.cn_enabled);
  r.get("freeze_phase1", c.freeze_phase1);
  r.get("seed", c.seed);
  r.get("latent_channels", c.latent_channels);
  r.get("diffusion_timesteps", c.diffusion_timesteps);
  r.get("sampling_steps", c.sampling_steps);
  r.get("denoiser_width", c.denoiser_width);
  r.get("min_depth", c.min_depth);
  r.get("max_depth", c.max_depth);
  r.get("eval_cap", c.eval_cap);
  r.get("flow_smoothness", c.flow_smoothness);
  r.get("pose_warmup", c.pose_warmup);
  r.get("grad_clip", c.grad_clip);
  r.get("train_fraction", c.train_fraction);
  r.get("val_fraction", c.val_fraction);
  r.get("cka_samples", c.cka_samples);
  r.get("cka_dim", c.cka_dim);
  r.get("bootstrap_resamples", c.bootstrap_resamples);
  r.get("workers", c.workers);
  if (const json* d = r.child("datagen")) {
    Reader rd(*d, "datagen");
    rd.get("sequences", c.datagen.sequences);
    rd.get("seed", c.datagen.seed);
    if (const json* s = rd.child("scene")) read_scene(*s, c.datagen.scene);
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(file.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace metafe::pipeline
