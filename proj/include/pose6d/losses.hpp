#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pose6d/geometry.hpp"
#include "pose6d/kdtree.hpp"
#include "pose6d/model.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

// Training losses with closed-form gradients. Pose losses differentiate with
// respect to the estimated rotation matrix and translation; callers that
// parameterize rotation by quaternion chain through rotation_grad_to_quat.

struct LossWeights {
  double alpha = 0.1;        // pose term
  double beta = 0.05;        // confidence term
  double gamma = 0.1;        // refinement term
  double kappa = 0.01;       // attention orthogonality term
  double lambda_obj = 5.0;   // confidence weight on object cells
  double lambda_noobj = 0.5; // confidence weight on background cells
};

// Confidence weight schedule: heavy object emphasis early, then uniform.
inline void apply_conf_schedule(LossWeights& w, int epoch, int total_epochs,
                                double switch_frac = 0.5) {
  if (total_epochs <= 0) throw config_error("total_epochs must be positive");
  bool early = double(epoch) < switch_frac * double(total_epochs);
  w.lambda_obj = early ? 5.0 : 1.0;
  w.lambda_noobj = early ? 0.5 : 1.0;
}

struct PoseLossGrads {
  double value = 0.0;
  Vec3 d_translation;  // dL / d t_hat
  Mat3 d_rotation;     // dL / d R_hat, entry (r, c) matches R_hat(r, c)
};

namespace detail {

inline void accumulate_point_grad(PoseLossGrads& out, const Vec3& diff, const Vec3& x,
                                  double inv_m) {
  double dist = diff.norm();
  out.value += dist * inv_m;
  if (dist <= 0.0) return;  // matched point: no direction, no gradient
  Vec3 u = diff * (inv_m / dist);
  out.d_translation = out.d_translation - u;
  for (int r = 0; r < 3; ++r) {
    double ur = r == 0 ? u.x : (r == 1 ? u.y : u.z);
    out.d_rotation.m[r][0] -= ur * x.x;
    out.d_rotation.m[r][1] -= ur * x.y;
    out.d_rotation.m[r][2] -= ur * x.z;
  }
}

}  // namespace detail

// Mean Euclidean distance between ground-truth and estimated transforms of
// the model points (norms, not squared norms). The symmetric form matches
// each estimated point to its nearest ground-truth point, with the match held
// fixed at the argmin so gradients flow only through the estimated side.
inline PoseLossGrads loss_pose(const Pose& gt, const Pose& pred, const ObjectModel& model,
                               bool symmetric) {
  const std::vector<Vec3>& points = model.points;
  if (points.empty()) throw config_error("loss_pose needs model points");
  PoseLossGrads out;
  double inv_m = 1.0 / double(points.size());
  if (!symmetric) {
    Mat3 r_gt = gt.rotation_matrix();
    Mat3 r_est = pred.rotation_matrix();
    for (const Vec3& x : points) {
      Vec3 diff = (r_gt * x + gt.translation) - (r_est * x + pred.translation);
      detail::accumulate_point_grad(out, diff, x, inv_m);
    }
  } else {
    std::vector<Vec3> gt_pts = transform_points(gt, points);
    std::vector<Vec3> est_pts = transform_points(pred, points);
    std::vector<int> match = closest_indices(est_pts, gt_pts);
    for (std::size_t i = 0; i < points.size(); ++i) {
      Vec3 diff = gt_pts[match[i]] - est_pts[i];
      detail::accumulate_point_grad(out, diff, points[i], inv_m);
    }
  }
  return out;
}

// dL/dq for an unnormalized quaternion q, given dL/dR at R(q / |q|). The
// rotation matrix is the standard unit-quaternion polynomial; the chain adds
// the normalization Jacobian (I - q_hat q_hat^T) / |q|.
inline std::array<double, 4> rotation_grad_to_quat(const Quaternion& q_raw, const Mat3& d_rot) {
  double n = std::sqrt(q_raw.w * q_raw.w + q_raw.x * q_raw.x + q_raw.y * q_raw.y +
                       q_raw.z * q_raw.z);
  if (n < 1e-12) throw invalid_rotation_error("cannot differentiate through a zero quaternion");
  double w = q_raw.w / n, x = q_raw.x / n, y = q_raw.y / n, z = q_raw.z / n;
  // dR/d(w,x,y,z) at a unit quaternion, each a 3x3 matrix
  const double dr[4][3][3] = {
      {{0, -2 * z, 2 * y}, {2 * z, 0, -2 * x}, {-2 * y, 2 * x, 0}},
      {{0, 2 * y, 2 * z}, {2 * y, -4 * x, -2 * w}, {2 * z, 2 * w, -4 * x}},
      {{-4 * y, 2 * x, 2 * w}, {2 * x, 0, 2 * z}, {-2 * w, 2 * z, -4 * y}},
      {{-4 * z, -2 * w, 2 * x}, {2 * w, -4 * z, 2 * y}, {2 * x, 2 * y, 0}},
  };
  double g_hat[4];
  for (int k = 0; k < 4; ++k) {
    double acc = 0.0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) acc += d_rot.m[r][c] * dr[k][r][c];
    g_hat[k] = acc;
  }
  double q_hat[4] = {w, x, y, z};
  double dot = 0.0;
  for (int k = 0; k < 4; ++k) dot += g_hat[k] * q_hat[k];
  std::array<double, 4> g{};
  for (int k = 0; k < 4; ++k) g[k] = (g_hat[k] - dot * q_hat[k]) / n;
  return g;
}

struct ConfLossGrads {
  double value = 0.0;
  Tensor grad;  // dL / d predicted, same shape as the prediction
};

// Weighted root-sum-of-squares over the confidence grid. The cell weight sits
// inside the squared sum: lambda_obj where the target marks an object,
// lambda_noobj elsewhere.
inline ConfLossGrads loss_conf(const Tensor& conf_gt, const Tensor& conf_pred,
                               const LossWeights& w) {
  if (!conf_gt.same_shape(conf_pred)) throw config_error("confidence grids must match in shape");
  double sum = 0.0;
  for (std::size_t i = 0; i < conf_gt.numel(); ++i) {
    double lambda = conf_gt.data[i] > 0.5 ? w.lambda_obj : w.lambda_noobj;
    double d = conf_gt.data[i] - conf_pred.data[i];
    sum += lambda * d * d;
  }
  ConfLossGrads out;
  out.value = std::sqrt(sum);
  out.grad = Tensor(conf_pred.shape);
  if (out.value > 0.0)
    for (std::size_t i = 0; i < conf_gt.numel(); ++i) {
      double lambda = conf_gt.data[i] > 0.5 ? w.lambda_obj : w.lambda_noobj;
      out.grad.data[i] = lambda * (conf_pred.data[i] - conf_gt.data[i]) / out.value;
    }
  return out;
}

struct OrthLossGrads {
  double value = 0.0;
  Tensor grad;  // dL / d attention, (N, H, W)
};

// Frobenius distance of the Gram matrix of L2-normalized attention maps from
// identity: pushes the maps toward non-overlapping support.
inline OrthLossGrads loss_orth(const Tensor& attention) {
  if (attention.rank() != 3) throw config_error("loss_orth expects (N,H,W) attention maps");
  int n = attention.dim(0);
  std::size_t hw = std::size_t(attention.dim(1)) * attention.dim(2);
  std::vector<double> norm(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      double v = attention.data[i * hw + p];
      s += v * v;
    }
    norm[i] = std::sqrt(s);
  }
  // Gram matrix of the normalized maps; zero-norm maps contribute zero rows
  std::vector<double> gram(std::size_t(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (norm[i] <= 0.0 || norm[j] <= 0.0) continue;
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p)
        s += attention.data[i * hw + p] * attention.data[j * hw + p];
      gram[std::size_t(i) * n + j] = s / (norm[i] * norm[j]);
    }
  double sq = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double gij = gram[std::size_t(i) * n + j] - (i == j ? 1.0 : 0.0);
      sq += gij * gij;
    }
  OrthLossGrads out;
  out.value = std::sqrt(sq);
  out.grad = Tensor(attention.shape);
  if (out.value <= 0.0) return out;
  // dL/dA_tilde = 2 A_tilde (Gram - I) / L, then back through a -> a / |a|
  for (int i = 0; i < n; ++i) {
    if (norm[i] <= 0.0) continue;
    for (std::size_t p = 0; p < hw; ++p) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) {
        if (norm[j] <= 0.0) continue;
        double gij = gram[std::size_t(i) * n + j] - (i == j ? 1.0 : 0.0);
        acc += 2.0 * gij * (attention.data[j * hw + p] / norm[j]);
      }
      out.grad.data[i * hw + p] = acc / out.value;
    }
    // normalization jacobian: (g - (g . a_hat) a_hat) / |a|
    double dot = 0.0;
    for (std::size_t p = 0; p < hw; ++p)
      dot += out.grad.data[i * hw + p] * (attention.data[i * hw + p] / norm[i]);
    for (std::size_t p = 0; p < hw; ++p)
      out.grad.data[i * hw + p] =
          (out.grad.data[i * hw + p] - dot * (attention.data[i * hw + p] / norm[i])) / norm[i];
  }
  return out;
}

struct LossParts {
  double pose = 0.0;
  double conf = 0.0;
  double ref = 0.0;
  double orth = 0.0;
};

struct TotalLoss {
  double value = 0.0;
  // dTotal/dPart — the weights themselves; spelled out so callers scale
  // upstream gradients without re-deriving the weighting.
  double d_pose = 0.0, d_conf = 0.0, d_ref = 0.0, d_orth = 0.0;
};

inline TotalLoss loss_total(const LossParts& parts, const LossWeights& w = {}) {
  if (!std::isfinite(parts.pose) || !std::isfinite(parts.conf) || !std::isfinite(parts.ref) ||
      !std::isfinite(parts.orth))
    throw divergence_error("non-finite loss term");
  TotalLoss out;
  out.value = w.alpha * parts.pose + w.beta * parts.conf + w.gamma * parts.ref +
              w.kappa * parts.orth;
  out.d_pose = w.alpha;
  out.d_conf = w.beta;
  out.d_ref = w.gamma;
  out.d_orth = w.kappa;
  return out;
}

}  // namespace pose6d
