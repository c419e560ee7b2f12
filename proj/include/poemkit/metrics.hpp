#pragma once

// Point-set error metrics in millimetres: plain, root-relative, Procrustes
// aligned, and the area under the PCK curve.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poemkit/errors.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/hand.hpp"

namespace poemkit {

inline void check_same_shape(const Points3& pred, const Points3& gt, const char* what) {
  if (pred.rows() != gt.rows()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(pred.rows()) + " predicted vs " +
                     std::to_string(gt.rows()) + " ground-truth points");
  }
  if (pred.rows() == 0) throw ShapeError(std::string(what) + ": empty point set");
}

/// Euclidean distance per point, in millimetres.
inline std::vector<double> point_errors_mm(const Points3& pred, const Points3& gt) {
  check_same_shape(pred, gt, "point_errors");
  std::vector<double> e(static_cast<std::size_t>(pred.rows()));
  for (Eigen::Index i = 0; i < pred.rows(); ++i) e[static_cast<std::size_t>(i)] = 1000.0 * (pred.row(i) - gt.row(i)).norm();
  return e;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double mpjpe(const Points3& pred, const Points3& gt) { return mean_of(point_errors_mm(pred, gt)); }
inline double mpvpe(const Points3& pred, const Points3& gt) { return mpjpe(pred, gt); }

/// Both sets re-centred on their own root point (given explicitly, so the
/// vertex variant can use the joint root).
inline double rr(const Points3& pred, const Points3& gt, const Vec3& pred_root, const Vec3& gt_root) {
  check_same_shape(pred, gt, "rr");
  const Points3 p = pred.rowwise() - pred_root.transpose();
  const Points3 g = gt.rowwise() - gt_root.transpose();
  return mpjpe(p, g);
}

inline double rr(const Points3& pred, const Points3& gt, int root_index = kRootKeypoint) {
  check_same_shape(pred, gt, "rr");
  if (root_index < 0 || root_index >= pred.rows()) throw ShapeError("rr: root index " + std::to_string(root_index) + " out of range");
  return rr(pred, gt, pred.row(root_index).transpose(), gt.row(root_index).transpose());
}

inline double pa(const Points3& pred, const Points3& gt) {
  check_same_shape(pred, gt, "pa");
  return mpjpe(procrustes_align(pred, gt).aligned, gt);
}

/// Trapezoidal area under PCK(t) = fraction of errors <= t over n_steps equal
/// intervals of [lo, hi], normalized to [0, 1].
inline double auc(const std::vector<double>& errors_mm, double lo = 0.0, double hi = 20.0, int n_steps = 100) {
  if (errors_mm.empty()) throw ShapeError("auc: no errors given");
  if (!(hi > lo && lo >= 0)) throw ConfigError("auc: need hi > lo >= 0");
  if (n_steps < 1) throw ConfigError("auc: n_steps must be >= 1");
  std::vector<double> sorted = errors_mm;
  std::sort(sorted.begin(), sorted.end());
  auto pck = [&](double t) {
    return static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin()) /
           static_cast<double>(sorted.size());
  };
  double area = 0, prev = pck(lo);
  for (int i = 1; i <= n_steps; ++i) {
    const double t = i == n_steps ? hi : lo + (hi - lo) * i / n_steps;
    const double cur = pck(t);
    area += 0.5 * (prev + cur);
    prev = cur;
  }
  return area / n_steps;
}

// ---------------------------------------------------------------------------
// Reports

/// One frame's hand: vertices and the 21 keypoints.
struct HandPoints {
  Points3 vertices;
  Points3 keypoints;
};

/// Splits a [V + 21, 3] query-point set.
inline HandPoints split_points(const Points3& all) {
  if (all.rows() <= kNumKeypoints) throw ShapeError("split_points: need more than 21 rows, got " + std::to_string(all.rows()));
  const Eigen::Index nv = all.rows() - kNumKeypoints;
  return {all.topRows(nv), all.bottomRows(kNumKeypoints)};
}

struct EvalReport {
  double mpjpe = 0, mpvpe = 0, rr_j = 0, rr_v = 0, pa_j = 0, pa_v = 0, auc_j = 0, auc_v = 0;
  double threshold_lo = 0, threshold_hi = 20;
  std::size_t n_frames = 0;
};

/// Per-frame metrics averaged over frames; AUC is computed per frame.
inline EvalReport evaluate(const std::vector<HandPoints>& pred, const std::vector<HandPoints>& gt, double lo = 0.0,
                           double hi = 20.0) {
  if (pred.size() != gt.size()) throw ShapeError("evaluate: frame counts differ");
  if (pred.empty()) throw ShapeError("evaluate: no frames");
  EvalReport r;
  r.threshold_lo = lo;
  r.threshold_hi = hi;
  r.n_frames = pred.size();
  for (std::size_t f = 0; f < pred.size(); ++f) {
    const auto& p = pred[f];
    const auto& g = gt[f];
    const Vec3 pr = p.keypoints.row(kRootKeypoint).transpose(), gr = g.keypoints.row(kRootKeypoint).transpose();
    r.mpjpe += mpjpe(p.keypoints, g.keypoints);
    r.mpvpe += mpvpe(p.vertices, g.vertices);
    r.rr_j += rr(p.keypoints, g.keypoints, pr, gr);
    r.rr_v += rr(p.vertices, g.vertices, pr, gr);
    r.pa_j += pa(p.keypoints, g.keypoints);
    r.pa_v += pa(p.vertices, g.vertices);
    r.auc_j += auc(point_errors_mm(p.keypoints, g.keypoints), lo, hi);
    r.auc_v += auc(point_errors_mm(p.vertices, g.vertices), lo, hi);
  }
  const double n = static_cast<double>(pred.size());
  for (double* v : {&r.mpjpe, &r.mpvpe, &r.rr_j, &r.rr_v, &r.pa_j, &r.pa_v, &r.auc_j, &r.auc_v}) *v /= n;
  return r;
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"mpvpe", r.mpvpe}, {"rr_v", r.rr_v}, {"pa_v", r.pa_v}, {"auc_v", r.auc_v},
       {"mpjpe", r.mpjpe}, {"rr_j", r.rr_j}, {"pa_j", r.pa_j}, {"auc_j", r.auc_j},
       {"threshold_range", {r.threshold_lo, r.threshold_hi}}, {"n_frames", r.n_frames}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.mpvpe = j.at("mpvpe");
  r.rr_v = j.at("rr_v");
  r.pa_v = j.at("pa_v");
  r.auc_v = j.at("auc_v");
  r.mpjpe = j.at("mpjpe");
  r.rr_j = j.at("rr_j");
  r.pa_j = j.at("pa_j");
  r.auc_j = j.at("auc_j");
  r.threshold_lo = j.at("threshold_range").at(0);
  r.threshold_hi = j.at("threshold_range").at(1);
  r.n_frames = j.at("n_frames");
}

inline constexpr const char* kReportColumns[] = {"MPVPE", "RR_V", "PA_V", "AUC_V", "MPJPE", "RR_J", "PA_J", "AUC_J"};

/// Fixed-width two-line table (header, values).
inline std::string format_report_table(const EvalReport& r) {
  std::string head, row;
  char buf[32];
  const double vals[] = {r.mpvpe, r.rr_v, r.pa_v, r.auc_v, r.mpjpe, r.rr_j, r.pa_j, r.auc_j};
  for (int i = 0; i < 8; ++i) {
    std::snprintf(buf, sizeof buf, "%10s", kReportColumns[i]);
    head += buf;
    std::snprintf(buf, sizeof buf, i % 4 == 3 ? "%10.4f" : "%10.3f", vals[i]);
    row += buf;
  }
  return head + "\n" + row + "\n";
}

}  // namespace poemkit
