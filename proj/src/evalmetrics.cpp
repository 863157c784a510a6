#include "metafe/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

namespace metafe::evalmetrics {

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double upper = v[mid];
  const double lower = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lower + upper);
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * (sorted.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
}

void check_sizes(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("prediction and ground truth differ in size");
}

}  // namespace

std::vector<double> median_scale(std::span<const double> pred, std::span<const double> gt) {
  check_sizes(pred, gt);
  std::vector<double> p, g;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] > 0.0) {
      p.push_back(pred[i]);
      g.push_back(gt[i]);
    }
  }
  if (g.empty()) throw std::invalid_argument("median_scale: no valid ground-truth pixels");
  const double mp = median_of(std::move(p));
  const double mg = median_of(std::move(g));
  if (!(mp > 0.0) || !(mg > 0.0)) throw std::invalid_argument("median_scale: medians must be positive");
  const double s = mg / mp;
  std::vector<double> out(pred.begin(), pred.end());
  for (auto& v : out) v *= s;
  return out;
}

std::vector<double> cap_depth(std::span<const double> depth, double cap) {
  if (!(cap > 0.0)) throw std::invalid_argument("cap_depth: cap must be positive");
  std::vector<double> out(depth.begin(), depth.end());
  for (auto& v : out) v = std::min(v, cap);
  return out;
}

MetricReport compute_metrics(std::span<const double> pred, std::span<const double> gt, std::span<const uint8_t> mask) {
  check_sizes(pred, gt);
  if (mask.size() != gt.size()) throw std::invalid_argument("compute_metrics: mask size mismatch");
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0;
  size_t good = 0, n = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    const double d = pred[i], ds = gt[i];
    const double err = ds - d;
    abs_rel += std::abs(err) / ds;
    sq_rel += err * err / ds;
    sq += err * err;
    const double lerr = std::log(ds) - std::log(d);
    sq_log += lerr * lerr;
    if (std::max(ds / d, d / ds) < kDeltaThreshold) ++good;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("compute_metrics: empty mask");
  MetricReport r;
  const double inv = 1.0 / static_cast<double>(n);
  r.abs_rel = abs_rel * inv;
  r.sq_rel = sq_rel * inv;
  r.rmse = std::sqrt(sq * inv);
  r.rmse_log = std::sqrt(sq_log * inv);
  r.delta = static_cast<double>(good) * inv;
  r.n_pixels = n;
  return r;
}

MetricReport compute_metrics(std::span<const double> pred, std::span<const double> gt) {
  std::vector<uint8_t> mask(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) mask[i] = gt[i] > 0.0;
  return compute_metrics(pred, gt, mask);
}

MetricReport evaluate_frame(std::span<const double> pred, std::span<const double> gt, double cap) {
  const auto scaled = cap_depth(median_scale(pred, gt), cap);
  const auto capped_gt = cap_depth(gt, cap);
  return compute_metrics(scaled, capped_gt);
}

Interval bootstrap_ci(std::span<const double> per_frame, double level, int resamples, uint64_t seed) {
  if (per_frame.size() < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 frames");
  if (!(level > 0.0 && level < 1.0) || resamples < 1) throw std::invalid_argument("bootstrap_ci: bad level/resamples");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, per_frame.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (size_t i = 0; i < per_frame.size(); ++i) s += per_frame[pick(rng)];
    m = s / static_cast<double>(per_frame.size());
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - level);
  return {percentile_sorted(means, tail), percentile_sorted(means, 1.0 - tail)};
}

MetricReport aggregate(std::span<const MetricReport> per_frame, double level, int resamples, uint64_t seed) {
  if (per_frame.empty()) throw std::invalid_argument("aggregate: no frames");
  std::array<std::vector<double>, 5> columns;
  MetricReport out;
  std::array<double, 5> sums{};
  for (const auto& r : per_frame) {
    const auto v = r.values();
    for (int m = 0; m < 5; ++m) {
      sums[m] += v[m];
      columns[m].push_back(v[m]);
    }
    out.n_pixels += r.n_pixels;
  }
  const double inv = 1.0 / static_cast<double>(per_frame.size());
  out.abs_rel = sums[0] * inv;
  out.sq_rel = sums[1] * inv;
  out.rmse = sums[2] * inv;
  out.rmse_log = sums[3] * inv;
  out.delta = sums[4] * inv;
  if (per_frame.size() >= 2) {
    std::array<Interval, 5> ci;
    for (int m = 0; m < 5; ++m) ci[m] = bootstrap_ci(columns[m], level, resamples, seed + m);
    out.ci = ci;
  }
  return out;
}

std::string csv_header(const std::string& prefix) {
  std::ostringstream s;
  s << prefix;
  for (size_t m = 0; m < kMetricNames.size(); ++m) {
    if (m > 0 || !prefix.empty()) s << ',';
    s << kMetricNames[m] << ',' << kMetricNames[m] << "_ci_lo," << kMetricNames[m] << "_ci_hi";
  }
  return s.str();
}

std::string csv_row(const MetricReport& report, const std::string& prefix) {
  std::ostringstream s;
  s << prefix << std::fixed << std::setprecision(6);
  const auto v = report.values();
  for (size_t m = 0; m < v.size(); ++m) {
    if (m > 0 || !prefix.empty()) s << ',';
    s << v[m] << ',';
    if (report.ci) s << (*report.ci)[m].lo << ',' << (*report.ci)[m].hi;
    else s << ',';
  }
  return s.str();
}

}  // namespace metafe::evalmetrics
