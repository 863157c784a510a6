#include "metafe/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include "json.hpp"
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace metafe::analysis {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

Eigen::MatrixXd centred(const Eigen::MatrixXd& x) { return x.rowwise() - x.colwise().mean(); }

}  // namespace

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: sample counts differ");
  if (x.rows() < 2) throw std::invalid_argument("linear_cka: need at least two samples");
  const Eigen::MatrixXd xc = centred(x), yc = centred(y);
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  if (!(xx > 0.0) || !(yy > 0.0)) throw std::invalid_argument("linear_cka: zero-variance input");
  const double xy = (xc.transpose() * yc).squaredNorm();
  return std::clamp(xy / (xx * yy), 0.0, 1.0);
}

PcaResult pca(const Eigen::MatrixXd& x, int dim) {
  if (dim < 1 || dim > std::min<int64_t>(x.rows(), x.cols())) {
    throw std::invalid_argument("pca: dim must be in [1, min(samples, features)]");
  }
  const Eigen::MatrixXd xc = centred(x);
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(std::max<int64_t>(1, x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double total = values.cwiseMax(0.0).sum();
  Eigen::MatrixXd basis(x.cols(), dim);
  PcaResult out;
  out.explained_variance.resize(dim);
  for (int k = 0; k < dim; ++k) {
    const int src = static_cast<int>(x.cols()) - 1 - k;
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    basis.col(k) = v;
    out.explained_variance(k) = total > 0.0 ? std::max(0.0, values(src)) / total : 0.0;
  }
  out.projection = xc * basis;
  return out;
}

Eigen::MatrixXd pca_align(const Eigen::MatrixXd& x, int dim) { return pca(x, dim).projection; }

int64_t ActivationDump::sample_count() const {
  if (layers.empty()) return 0;
  const int64_t n = layers.begin()->second.size(0);
  for (const auto& [idx, t] : layers) {
    if (t.size(0) != n) throw std::invalid_argument("ActivationDump: inconsistent sample count at layer " + std::to_string(idx));
  }
  return n;
}

void ActivationDump::save(const fs::path& directory) const {
  fs::create_directories(directory);
  nlohmann::json manifest;
  manifest["label"] = label;
  manifest["dtype"] = "float32";
  manifest["layout"] = "NCHW";
  for (const auto& [idx, t] : layers) {
    char name[32];
    std::snprintf(name, sizeof(name), "layer_%02d.bin", idx);
    auto data = t.to(torch::kFloat32).contiguous();
    std::ofstream out(directory / name, std::ios::binary);
    out.write(reinterpret_cast<const char*>(data.data_ptr<float>()), static_cast<std::streamsize>(data.numel() * sizeof(float)));
    manifest["layers"].push_back({{"index", idx}, {"file", name}, {"shape", data.sizes().vec()}});
  }
  std::ofstream(directory / "manifest.json") << manifest.dump(2) << "\n";
}

ActivationDump ActivationDump::load(const fs::path& directory) {
  std::ifstream in(directory / "manifest.json");
  if (!in) throw std::runtime_error("missing activation manifest in " + directory.string());
  const auto manifest = nlohmann::json::parse(in);
  ActivationDump dump;
  dump.label = manifest.value("label", "");
  for (const auto& entry : manifest.at("layers")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::kFloat32);
    std::ifstream bin(directory / entry.at("file").get<std::string>(), std::ios::binary);
    bin.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!bin) throw std::runtime_error("truncated activation file " + entry.at("file").get<std::string>());
    dump.layers[entry.at("index").get<int>()] = t;
  }
  return dump;
}

Eigen::MatrixXd flatten_positions(const torch::Tensor& activation) {
  if (activation.dim() != 4) throw std::invalid_argument("flatten_positions expects [N,C,h,w]");
  auto rows = activation.permute({0, 2, 3, 1}).reshape({-1, activation.size(1)}).to(torch::kFloat64).contiguous();
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      rows.data_ptr<double>(), rows.size(0), rows.size(1));
}

std::string SimilarityGrid::to_csv() const {
  std::ostringstream s;
  s << "layer";
  for (const auto& c : col_labels) s << ',' << c;
  s << '\n' << std::fixed << std::setprecision(6);
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    s << row_labels[r];
    for (Eigen::Index c = 0; c < values.cols(); ++c) s << ',' << values(r, c);
    s << '\n';
  }
  return s.str();
}

double SimilarityGrid::block_mean(int first, int last) const {
  if (first < 0 || last >= values.rows() || last >= values.cols() || first > last) {
    throw std::out_of_range("SimilarityGrid::block_mean: block outside the grid");
  }
  return values.block(first, first, last - first + 1, last - first + 1).mean();
}

SimilarityGrid cka_grid(const ActivationDump& a, const ActivationDump& b, int dim) {
  if (a.sample_count() != b.sample_count()) throw std::invalid_argument("cka_grid: dumps use different sample sets");
  SimilarityGrid grid;
  grid.values.resize(static_cast<Eigen::Index>(a.layers.size()), static_cast<Eigen::Index>(b.layers.size()));
  for (const auto& [i, ta] : a.layers) grid.row_labels.push_back(a.label + "." + std::to_string(i));
  for (const auto& [j, tb] : b.layers) grid.col_labels.push_back(b.label + "." + std::to_string(j));

  Eigen::Index r = 0;
  for (const auto& [i, ta] : a.layers) {
    Eigen::Index c = 0;
    for (const auto& [j, tb] : b.layers) {
      const bool same_scale = ta.size(2) == tb.size(2) && ta.size(3) == tb.size(3);
      if (same_scale) {
        grid.values(r, c) = linear_cka(flatten_positions(ta), flatten_positions(tb));
      } else {
        const int64_t h = std::min(ta.size(2), tb.size(2)), w = std::min(ta.size(3), tb.size(3));
        auto pool = [&](const torch::Tensor& t) {
          return F::adaptive_avg_pool2d(t, F::AdaptiveAvgPool2dFuncOptions({h, w}));
        };
        const Eigen::MatrixXd xa = flatten_positions(pool(ta)), xb = flatten_positions(pool(tb));
        const int d = static_cast<int>(std::min<int64_t>({dim, xa.cols(), xb.cols()}));
        grid.values(r, c) = linear_cka(pca_align(xa, d), pca_align(xb, d));
      }
      ++c;
    }
    ++r;
  }
  return grid;
}

void write_heatmap(const SimilarityGrid& grid, const fs::path& png, int cell) {
  cv::Mat values(static_cast<int>(grid.values.rows()), static_cast<int>(grid.values.cols()), CV_8UC1);
  for (int r = 0; r < values.rows; ++r)
    for (int c = 0; c < values.cols; ++c)
      values.at<uint8_t>(r, c) = static_cast<uint8_t>(std::lround(std::clamp(grid.values(r, c), 0.0, 1.0) * 255.0));
  cv::Mat big, colour;
  cv::resize(values, big, cv::Size(values.cols * cell, values.rows * cell), 0, 0, cv::INTER_NEAREST);
  cv::applyColorMap(big, colour, cv::COLORMAP_VIRIDIS);
  if (!cv::imwrite(png.string(), colour)) throw std::runtime_error("failed to write heatmap " + png.string());
}

}  // namespace metafe::analysis
