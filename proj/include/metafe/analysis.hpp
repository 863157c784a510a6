#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metafe/types.hpp"

namespace metafe::analysis {

/// Linear CKA between column-centred activations:
/// ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F). Rows are samples.
/// Throws on a sample-count mismatch, fewer than two samples or zero variance.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct PcaResult {
  Eigen::MatrixXd projection;          // samples x dim
  Eigen::VectorXd explained_variance;  // ratio per kept component
};

/// Projection onto the top `dim` principal components of the centred matrix. Each component is
/// signed so its largest-magnitude loading is positive.
PcaResult pca(const Eigen::MatrixXd& x, int dim);
Eigen::MatrixXd pca_align(const Eigen::MatrixXd& x, int dim);

/// Decoder activations keyed by layer index, each [N,C,h,w] float32.
struct ActivationDump {
  std::string label;
  std::map<int, torch::Tensor> layers;

  int64_t sample_count() const;
  void save(const std::filesystem::path& directory) const;
  static ActivationDump load(const std::filesystem::path& directory);
};

/// Rows = (sample, position) pairs, columns = channels.
Eigen::MatrixXd flatten_positions(const torch::Tensor& activation);

struct SimilarityGrid {
  std::vector<std::string> row_labels;  // dump A layers
  std::vector<std::string> col_labels;  // dump B layers
  Eigen::MatrixXd values;

  std::string to_csv() const;
  /// Mean over a square block [first, last] x [first, last].
  double block_mean(int first, int last) const;
};

/// CKA for every layer pair. Same-resolution pairs are compared directly; for differing
/// resolutions the finer activation is average-pooled onto the coarser grid and both sides are
/// PCA-aligned to min(dim, channels_a, channels_b) components first.
SimilarityGrid cka_grid(const ActivationDump& a, const ActivationDump& b, int dim = 64);

/// Colour-mapped heatmap, `cell` pixels per entry.
void write_heatmap(const SimilarityGrid& grid, const std::filesystem::path& png, int cell = 24);

}  // namespace metafe::analysis
