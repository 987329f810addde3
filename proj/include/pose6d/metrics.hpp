#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pose6d/geometry.hpp"
#include "pose6d/kdtree.hpp"
#include "pose6d/model.hpp"

namespace pose6d {

// Mean distance between ground-truth and estimated transforms of the model
// points. The symmetric form matches each ground-truth point to the nearest
// estimated point instead of its own image.
inline double metric_add(const Pose& gt, const Pose& pred, const ObjectModel& model,
                         bool symmetric) {
  const std::vector<Vec3>& points = model.points;
  if (points.empty()) throw config_error("metric_add needs model points");
  std::vector<Vec3> gt_pts = transform_points(gt, points);
  std::vector<Vec3> est_pts = transform_points(pred, points);
  double sum = 0.0;
  if (!symmetric) {
    for (std::size_t i = 0; i < points.size(); ++i) sum += (gt_pts[i] - est_pts[i]).norm();
  } else {
    std::vector<int> match = closest_indices(gt_pts, est_pts);
    for (std::size_t i = 0; i < points.size(); ++i)
      sum += (gt_pts[i] - est_pts[match[i]]).norm();
  }
  return sum / double(points.size());
}

// Mean reprojection distance in pixels. For symmetric objects the error is
// taken against every declared symmetry of the ground truth and the lowest
// value kept.
inline double metric_proj2d(const Pose& gt, const Pose& pred, const ObjectModel& model,
                            const CameraIntrinsics& k, bool symmetric) {
  const std::vector<Vec3>& points = model.points;
  if (points.empty()) throw config_error("metric_proj2d needs model points");
  std::vector<Vec2> est_px = project_points(transform_points(pred, points), k);
  std::vector<Pose> gt_candidates;
  if (symmetric && !model.symmetries.empty())
    for (const Pose& sym : model.symmetries) gt_candidates.push_back(gt.compose(sym));
  else
    gt_candidates.push_back(gt);
  double best = std::numeric_limits<double>::infinity();
  for (const Pose& g : gt_candidates) {
    std::vector<Vec2> gt_px = project_points(transform_points(g, points), k);
    double sum = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double dx = gt_px[i].x - est_px[i].x, dy = gt_px[i].y - est_px[i].y;
      sum += std::sqrt(dx * dx + dy * dy);
    }
    best = std::min(best, sum / double(points.size()));
  }
  return best;
}

/// Fraction of errors strictly below the threshold; ties count as incorrect.
inline double accuracy_at_threshold(const std::vector<double>& errors, double threshold) {
  if (errors.empty()) throw config_error("accuracy over an empty error list is undefined");
  if (threshold <= 0.0) throw config_error("accuracy threshold must be positive");
  std::size_t hits = 0;
  for (double e : errors)
    if (e < threshold) ++hits;
  return double(hits) / double(errors.size());
}

// Area under the accuracy-vs-threshold curve from 0 to max_threshold,
// normalized to [0, 1]. Each error contributes the span of thresholds it
// passes, which equals the exact piecewise-constant integral.
inline double auc_add(const std::vector<double>& errors, double max_threshold = 0.10) {
  if (errors.empty()) throw config_error("AUC over an empty error list is undefined");
  if (max_threshold <= 0.0) throw config_error("AUC threshold cap must be positive");
  double sum = 0.0;
  for (double e : errors) sum += std::max(0.0, max_threshold - e);
  return sum / (double(errors.size()) * max_threshold);
}

struct SampleEval {
  int object_id = 0;
  double add = 0.0;     // meters
  double proj2d = 0.0;  // pixels
};

struct MetricThresholds {
  double proj_px = 5.0;       // reprojection accuracy cutoff in pixels
  double add_diameter = 0.1;  // ADD cutoff as a fraction of object diameter
  double add_abs = 0.02;      // ADD cutoff in meters
  double auc_cap = 0.10;      // AUC integration cap in meters
};

struct MetricSummary {
  int count = 0;
  double add_mean = 0.0;
  double proj_mean = 0.0;
  double acc_add_diameter = 0.0;
  double acc_add_abs = 0.0;
  double acc_proj = 0.0;
  double auc = 0.0;
};

inline MetricSummary summarize_samples(const std::vector<SampleEval>& samples, double diameter,
                                       const MetricThresholds& t) {
  if (samples.empty()) throw config_error("cannot summarize an empty sample list");
  MetricSummary s;
  s.count = int(samples.size());
  std::vector<double> adds, projs;
  adds.reserve(samples.size());
  projs.reserve(samples.size());
  for (const auto& e : samples) {
    adds.push_back(e.add);
    projs.push_back(e.proj2d);
    s.add_mean += e.add;
    s.proj_mean += e.proj2d;
  }
  s.add_mean /= double(samples.size());
  s.proj_mean /= double(samples.size());
  s.acc_add_diameter = accuracy_at_threshold(adds, t.add_diameter * diameter);
  s.acc_add_abs = accuracy_at_threshold(adds, t.add_abs);
  s.acc_proj = accuracy_at_threshold(projs, t.proj_px);
  s.auc = auc_add(adds, t.auc_cap);
  return s;
}

// Per-object summaries plus their unweighted mean, mirroring the MEAN row of
// a per-class results table.
struct MetricReport {
  std::map<int, MetricSummary> per_object;
  MetricSummary mean;
  MetricThresholds thresholds;
};

inline MetricReport make_report(const std::vector<SampleEval>& samples,
                                const std::map<int, double>& diameters,
                                const MetricThresholds& t = {}) {
  if (samples.empty()) throw config_error("cannot report on an empty evaluation");
  MetricReport report;
  report.thresholds = t;
  std::map<int, std::vector<SampleEval>> by_object;
  for (const auto& s : samples) by_object[s.object_id].push_back(s);
  for (const auto& [id, list] : by_object) {
    auto it = diameters.find(id);
    if (it == diameters.end())
      throw config_error("missing diameter for object " + std::to_string(id));
    report.per_object[id] = summarize_samples(list, it->second, t);
  }
  MetricSummary& m = report.mean;
  for (const auto& [id, s] : report.per_object) {
    m.count += s.count;
    m.add_mean += s.add_mean;
    m.proj_mean += s.proj_mean;
    m.acc_add_diameter += s.acc_add_diameter;
    m.acc_add_abs += s.acc_add_abs;
    m.acc_proj += s.acc_proj;
    m.auc += s.auc;
  }
  double n = double(report.per_object.size());
  m.add_mean /= n;
  m.proj_mean /= n;
  m.acc_add_diameter /= n;
  m.acc_add_abs /= n;
  m.acc_proj /= n;
  m.auc /= n;
  return report;
}

inline std::string format_report(const MetricReport& report) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  out << "object    n     add_mean  proj_mean  add<10%d  add<2cm   proj<" << std::setprecision(1)
      << report.thresholds.proj_px << "px  auc\n";
  out.precision(4);
  auto row = [&](const std::string& name, const MetricSummary& s) {
    out << std::left << std::setw(9) << name << std::right << std::setw(4) << s.count << "  "
        << std::setw(9) << s.add_mean << "  " << std::setw(9) << s.proj_mean << "  "
        << std::setw(8) << s.acc_add_diameter << "  " << std::setw(8) << s.acc_add_abs << "  "
        << std::setw(9) << s.acc_proj << "  " << std::setw(6) << s.auc << "\n";
  };
  for (const auto& [id, s] : report.per_object) row(std::to_string(id), s);
  row("MEAN", report.mean);
  return out.str();
}

}  // namespace pose6d
