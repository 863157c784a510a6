#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace metafe::evalmetrics {

inline constexpr double kDeltaThreshold = 1.25;
inline constexpr double kDefaultCapMm = 150.0;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Column order: AbsRel, SqRel, RMSE, RMSElog, delta.
inline constexpr std::array<const char*, 5> kMetricNames = {"abs_rel", "sq_rel", "rmse", "rmse_log", "delta"};

struct MetricReport {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;  // mm
  double rmse_log = 0.0;
  double delta = 0.0;  // fraction in [0,1]
  size_t n_pixels = 0;
  std::optional<std::array<Interval, 5>> ci;

  std::array<double, 5> values() const { return {abs_rel, sq_rel, rmse, rmse_log, delta}; }
};

/// pred * median(gt) / median(pred), medians taken over pixels with gt > 0.
std::vector<double> median_scale(std::span<const double> pred, std::span<const double> gt);

/// Element-wise min(d, cap).
std::vector<double> cap_depth(std::span<const double> depth, double cap);

/// The five statistics over pixels where mask != 0.
MetricReport compute_metrics(std::span<const double> pred, std::span<const double> gt,
                             std::span<const uint8_t> mask);
/// Mask defaults to gt > 0.
MetricReport compute_metrics(std::span<const double> pred, std::span<const double> gt);

/// median_scale -> cap both -> metrics, the per-frame evaluation contract.
MetricReport evaluate_frame(std::span<const double> pred, std::span<const double> gt, double cap = kDefaultCapMm);

/// Percentile bootstrap CI of the mean over frames.
Interval bootstrap_ci(std::span<const double> per_frame, double level = 0.95, int resamples = 2000,
                      uint64_t seed = 0);

/// Frame-mean of each metric, with bootstrap CIs attached.
MetricReport aggregate(std::span<const MetricReport> per_frame, double level = 0.95, int resamples = 2000,
                       uint64_t seed = 0);

/// "abs_rel,abs_rel_lo,abs_rel_hi,sq_rel,..." header; `prefix` columns are prepended verbatim.
std::string csv_header(const std::string& prefix = "");
std::string csv_row(const MetricReport& report, const std::string& prefix = "");

}  // namespace metafe::evalmetrics
