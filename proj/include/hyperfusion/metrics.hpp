#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <string>
#include <vector>

#include "hyperfusion/errors.hpp"

namespace hyperfusion {

/// Saliency values in [0,1], row-major height x width.
struct SaliencyMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  void validate() const {
    if (values.size() != width * height)
      throw ShapeError("SaliencyMap: " + std::to_string(values.size()) + " values for " + std::to_string(height) +
                       "x" + std::to_string(width));
    for (double v : values)
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("SaliencyMap: value outside [0,1]");
  }
};

/// Binary mask, row-major, values 0 or 1.
struct GroundTruthMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;

  bool at(std::size_t y, std::size_t x) const { return values[y * width + x] != 0; }

  std::size_t foreground() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
  }

  void validate() const {
    if (values.size() != width * height)
      throw ShapeError("GroundTruthMask: " + std::to_string(values.size()) + " values for " +
                       std::to_string(height) + "x" + std::to_string(width));
    for (auto v : values)
      if (v > 1) throw ParameterError("GroundTruthMask: values must be 0 or 1");
  }
};

struct PrPoint {
  double precision = 0.0;
  double recall = 0.0;
};

// Index t holds the point for "quantized value > t".
using PrCurve = std::array<PrPoint, 256>;

inline constexpr double kDefaultEta2 = 0.3;
inline constexpr double kDefaultSLambda = 0.5;

namespace detail {

inline void check_same_dims(const char* op, const SaliencyMap& map, const GroundTruthMask& gt) {
  map.validate();
  gt.validate();
  if (map.width != gt.width || map.height != gt.height) {
    const std::size_t a[] = {map.height, map.width}, b[] = {gt.height, gt.width};
    shape_fail(op, a, b, "map vs ground truth");
  }
}

inline int quantize(double v) { return static_cast<int>(std::lround(v * 255.0)); }

}  // namespace detail

/// Precision/recall of the 8-bit quantized map binarized at each of the 256
/// thresholds (pixel is predicted salient when its level exceeds t). An empty
/// prediction has precision 1.
inline PrCurve pr_curve(const SaliencyMap& map, const GroundTruthMask& gt) {
  detail::check_same_dims("pr_curve", map, gt);
  const std::size_t positives = gt.foreground();
  if (positives == 0) throw ContractError("pr_curve: ground truth has no foreground pixel");
  std::array<std::size_t, 256> fg_hist{}, bg_hist{};
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const int q = detail::quantize(map.values[i]);
    (gt.values[i] ? fg_hist : bg_hist)[static_cast<std::size_t>(q)]++;
  }
  // Suffix sums give counts of levels strictly above t.
  PrCurve curve;
  std::size_t tp = 0, fp = 0;
  for (int t = 255; t >= 0; --t) {
    const auto ut = static_cast<std::size_t>(t);
    curve[ut].precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    curve[ut].recall = static_cast<double>(tp) / static_cast<double>(positives);
    tp += fg_hist[ut];
    fp += bg_hist[ut];
  }
  return curve;
}

/// (1 + η²) P R / (η² P + R); zero when both are zero.
inline double f_measure(double precision, double recall, double eta2 = kDefaultEta2) {
  const double denom = eta2 * precision + recall;
  if (denom <= 0.0) return 0.0;
  return (1.0 + eta2) * precision * recall / denom;
}

struct AdaptiveScore {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

/// F-measure after binarizing at min(2 * mean(map), 1).
inline AdaptiveScore adaptive_f_measure(const SaliencyMap& map, const GroundTruthMask& gt,
                                        double eta2 = kDefaultEta2) {
  detail::check_same_dims("adaptive_f_measure", map, gt);
  double sum = 0.0;
  for (double v : map.values) sum += v;
  AdaptiveScore s;
  s.threshold = std::min(2.0 * sum / static_cast<double>(map.values.size()), 1.0);
  std::size_t tp = 0, fp = 0, positives = 0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const bool predicted = map.values[i] >= s.threshold;
    positives += gt.values[i];
    tp += predicted && gt.values[i];
    fp += predicted && !gt.values[i];
  }
  s.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = positives == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(positives);
  s.f = f_measure(s.precision, s.recall, eta2);
  return s;
}

inline double max_f_measure(const PrCurve& curve, double eta2 = kDefaultEta2) {
  double best = 0.0;
  for (const auto& p : curve) best = std::max(best, f_measure(p.precision, p.recall, eta2));
  return best;
}

inline double mae(const SaliencyMap& map, const GroundTruthMask& gt) {
  detail::check_same_dims("mae", map, gt);
  double s = 0.0;
  for (std::size_t i = 0; i < map.values.size(); ++i) s += std::abs(map.values[i] - gt.values[i]);
  return s / static_cast<double>(map.values.size());
}

namespace detail {

// Guard constant of the structure-measure reference (machine epsilon).
inline constexpr double kSEps = std::numeric_limits<double>::epsilon();

// 2x / (x² + 1 + σ) over the selected pixels, σ the sample standard deviation.
inline double object_score(const std::vector<double>& vals) {
  if (vals.empty()) return 0.0;
  const double n = static_cast<double>(vals.size());
  double s = 0.0;
  for (double v : vals) s += v;
  const double x = s / n;
  double ss = 0.0;
  for (double v : vals) ss += (v - x) * (v - x);
  const double sigma = vals.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return 2.0 * x / (x * x + 1.0 + sigma + kSEps);
}

struct Rect {
  std::size_t y0, y1, x0, x1;  // half-open
  std::size_t area() const { return (y1 - y0) * (x1 - x0); }
};

inline double region_ssim(const SaliencyMap& map, const GroundTruthMask& gt, const Rect& r) {
  const double n = static_cast<double>(r.area());
  double sx = 0.0, sy = 0.0;
  for (std::size_t y = r.y0; y < r.y1; ++y)
    for (std::size_t x = r.x0; x < r.x1; ++x) {
      sx += map.at(y, x);
      sy += gt.at(y, x);
    }
  const double mx = sx / n, my = sy / n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t y = r.y0; y < r.y1; ++y)
    for (std::size_t x = r.x0; x < r.x1; ++x) {
      const double dx = map.at(y, x) - mx, dy = static_cast<double>(gt.at(y, x)) - my;
      vx += dx * dx;
      vy += dy * dy;
      cxy += dx * dy;
    }
  vx /= (n - 1.0 + kSEps);
  vy /= (n - 1.0 + kSEps);
  cxy /= (n - 1.0 + kSEps);
  const double alpha = 4.0 * mx * my * cxy;
  const double beta = (mx * mx + my * my) * (vx + vy);
  if (alpha != 0.0) return alpha / (beta + kSEps);
  return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

/// Object-aware similarity: foreground and background distributions
/// compared separately, mixed by the foreground fraction.
inline double s_object(const SaliencyMap& map, const GroundTruthMask& gt) {
  detail::check_same_dims("s_object", map, gt);
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (gt.values[i])
      fg.push_back(map.values[i]);
    else
      bg.push_back(1.0 - map.values[i]);
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(map.values.size());
  return u * detail::object_score(fg) + (1.0 - u) * detail::object_score(bg);
}

/// Candidate split positions (columns, rows) about the foreground centroid,
/// taken as the pixel boundary nearest to it with pixel centres at i + 0.5.
/// A centroid exactly on a pixel centre yields both neighbouring boundaries,
/// which keeps the region term mirror-symmetric.
struct CentroidSplit {
  std::vector<std::size_t> cols;
  std::vector<std::size_t> rows;
};

namespace detail {

inline std::vector<std::size_t> nearest_boundaries(std::size_t coord_sum, std::size_t count) {
  // centroid = (2 * coord_sum + count) / (2 * count), computed exactly
  const std::size_t num = 2 * coord_sum + count, den = 2 * count;
  const std::size_t whole = num / den, rem = num % den;
  if (2 * rem < den) return {whole};
  if (2 * rem > den) return {whole + 1};
  return {whole, whole + 1};
}

}  // namespace detail

inline CentroidSplit centroid_split(const GroundTruthMask& gt) {
  const std::size_t total = gt.foreground();
  if (total == 0) return {{gt.width / 2}, {gt.height / 2}};
  std::size_t sx = 0, sy = 0;
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < gt.width; ++x)
      if (gt.at(y, x)) {
        sx += x;
        sy += y;
      }
  return {detail::nearest_boundaries(sx, total), detail::nearest_boundaries(sy, total)};
}

/// Region-aware similarity: SSIM-style score of the four quadrants around
/// the ground-truth centroid, weighted by quadrant area. Tied splits are
/// averaged.
inline double s_region(const SaliencyMap& map, const GroundTruthMask& gt) {
  detail::check_same_dims("s_region", map, gt);
  const auto split = centroid_split(gt);
  const std::size_t w = gt.width, h = gt.height;
  const double area = static_cast<double>(w * h);
  double total = 0.0;
  for (std::size_t cx : split.cols)
    for (std::size_t cy : split.rows) {
      const detail::Rect quads[] = {{0, cy, 0, cx}, {0, cy, cx, w}, {cy, h, 0, cx}, {cy, h, cx, w}};
      double q = 0.0;
      for (const auto& r : quads) {
        if (r.area() == 0) continue;
        q += static_cast<double>(r.area()) / area * detail::region_ssim(map, gt, r);
      }
      total += q;
    }
  return total / static_cast<double>(split.cols.size() * split.rows.size());
}

/// λ S_o + (1 - λ) S_r, clamped at zero. All-background ground truth scores
/// 1 - mean(map); all-foreground scores mean(map).
inline double s_measure(const SaliencyMap& map, const GroundTruthMask& gt, double lambda = kDefaultSLambda) {
  detail::check_same_dims("s_measure", map, gt);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("s_measure: lambda must lie in [0,1]");
  const std::size_t fg = gt.foreground();
  double mean = 0.0;
  for (double v : map.values) mean += v;
  mean /= static_cast<double>(map.values.size());
  if (fg == 0) return 1.0 - mean;
  if (fg == gt.values.size()) return mean;
  const double q = lambda * s_object(map, gt) + (1.0 - lambda) * s_region(map, gt);
  return std::max(q, 0.0);
}

struct ImageScores {
  std::string image;
  AdaptiveScore adaptive;
  double f_max = 0.0;
  double mae = 0.0;
  double s_lambda = 0.0;
  PrCurve pr{};
};

struct EvalReport {
  std::vector<ImageScores> images;
  PrCurve mean_pr{};
  double f_eta = 0.0;  // mean of per-image adaptive F
  double f_max = 0.0;  // max over thresholds of F(mean P, mean R)
  double mae = 0.0;
  double s_lambda = 0.0;
};

inline ImageScores score_image(std::string name, const SaliencyMap& map, const GroundTruthMask& gt,
                               double eta2 = kDefaultEta2) {
  ImageScores s;
  s.image = std::move(name);
  s.pr = pr_curve(map, gt);
  s.adaptive = adaptive_f_measure(map, gt, eta2);
  s.f_max = max_f_measure(s.pr, eta2);
  s.mae = mae(map, gt);
  s.s_lambda = s_measure(map, gt);
  return s;
}

/// Dataset means in image order (deterministic reduction).
inline EvalReport summarize(std::vector<ImageScores> images, double eta2 = kDefaultEta2) {
  if (images.empty()) throw InputError("summarize: no images");
  EvalReport r;
  r.images = std::move(images);
  const double n = static_cast<double>(r.images.size());
  for (const auto& s : r.images) {
    r.f_eta += s.adaptive.f;
    r.mae += s.mae;
    r.s_lambda += s.s_lambda;
    for (std::size_t t = 0; t < 256; ++t) {
      r.mean_pr[t].precision += s.pr[t].precision;
      r.mean_pr[t].recall += s.pr[t].recall;
    }
  }
  r.f_eta /= n;
  r.mae /= n;
  r.s_lambda /= n;
  for (auto& p : r.mean_pr) {
    p.precision /= n;
    p.recall /= n;
  }
  r.f_max = max_f_measure(r.mean_pr, eta2);
  return r;
}

/// image,f_eta,mae,s_lambda,f_max per image, then a MEAN row.
inline void write_report_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << std::setprecision(17);
  out << "image,f_eta,mae,s_lambda,f_max\n";
  for (const auto& s : r.images)
    out << s.image << ',' << s.adaptive.f << ',' << s.mae << ',' << s.s_lambda << ',' << s.f_max << '\n';
  out << "MEAN," << r.f_eta << ',' << r.mae << ',' << r.s_lambda << ',' << r.f_max << '\n';
  if (!out) throw InputError("write failed: " + path);
}

/// threshold,precision,recall of the dataset-mean curve.
inline void write_pr_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << std::setprecision(17);
  out << "threshold,precision,recall\n";
  for (std::size_t t = 0; t < 256; ++t) out << t << ',' << r.mean_pr[t].precision << ',' << r.mean_pr[t].recall << '\n';
  if (!out) throw InputError("write failed: " + path);
}

}  // namespace hyperfusion
