#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>

#include "metafe/pipeline.hpp"

namespace metafe::pipeline {

std::string git_blob_hash(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  const auto size = fs::file_size(file);
  const std::string header = "blob " + std::to_string(size) + '\0';

  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1) throw std::runtime_error("SHA-1 unavailable");
  EVP_DigestUpdate(ctx.get(), header.data(), header.size());
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

fs::path checkpoint_dir(const fs::path& run_dir, Stage stage) { return run_dir / "checkpoints" / std::string(to_string(stage)); }

fs::path find_checkpoint(const RunConfig& config, Stage stage) {
  for (const auto& root : {config.run_dir, config.upstream_dir}) {
    if (root.empty()) continue;
    auto dir = checkpoint_dir(root, stage);
    if (fs::exists(dir / "meta.json")) return dir;
  }
  throw std::runtime_error("missing prerequisite checkpoint for stage '" + std::string(to_string(stage)) +
                           "' (looked under " + config.run_dir +
                           (config.upstream_dir.empty() ? "" : " and " + config.upstream_dir) + ")");
}

CheckpointMeta read_meta(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("missing checkpoint metadata " + (dir / "meta.json").string());
  const auto j = nlohmann::json::parse(in);
  CheckpointMeta meta;
  meta.stage = stage_from_string(j.at("stage").get<std::string>());
  meta.content_hash = j.at("content_hash").get<std::string>();
  meta.steps = j.at("steps").get<int>();
  meta.final_loss = j.at("final_loss").get<double>();
  meta.config = j.at("config");
  return meta;
}

void save_checkpoint(const fs::path& dir, Stage stage, const std::vector<NamedModule>& modules,
                     torch::optim::Optimizer* optimizer, const RunConfig& config, int steps, double final_loss) {
  fs::create_directories(dir);
  torch::serialize::OutputArchive root;
  for (const auto& m : modules) {
    torch::serialize::OutputArchive sub;
    m.module->save(sub);
    root.write(m.name, sub);
  }
  root.save_to((dir / "model.pt").string());
  if (optimizer) torch::save(*optimizer, (dir / "optimizer.pt").string());

  nlohmann::json meta = {{"stage", std::string(to_string(stage))},
                         {"content_hash", git_blob_hash(dir / "model.pt")},
                         {"steps", steps},
                         {"final_loss", final_loss},
                         {"modules", nlohmann::json::array()},
                         {"config", config.to_json()}};
  for (const auto& m : modules) meta["modules"].push_back(m.name);
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

CheckpointMeta load_checkpoint(const fs::path& dir, const std::vector<NamedModule>& modules) {
  auto meta = read_meta(dir);
  const auto actual = git_blob_hash(dir / "model.pt");
  if (actual != meta.content_hash) {
    throw std::runtime_error("checkpoint " + dir.string() + " is corrupt: hash " + actual + " != recorded " +
                             meta.content_hash);
  }
  torch::serialize::InputArchive root;
  root.load_from((dir / "model.pt").string());
  for (const auto& m : modules) {
    torch::serialize::InputArchive sub;
    if (!root.try_read(m.name, sub)) throw std::runtime_error("checkpoint " + dir.string() + " lacks module '" + m.name + "'");
    m.module->load(sub);
  }
  return meta;
}

}  // namespace metafe::pipeline
