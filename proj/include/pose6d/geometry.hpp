#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pose6d/errors.hpp"
#include "pose6d/random.hpp"

namespace pose6d {

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return n > 0.0 ? Vec3{x / n, y / n, z / n} : Vec3{};
  }
};

struct Mat3 {
  // Row-major m[row][col].
  std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  static Mat3 identity() { return Mat3{}; }

  double& operator()(int r, int c) { return m[r][c]; }
  double operator()(int r, int c) const { return m[r][c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += m[i][k] * o.m[k][j];
        r.m[i][j] = s;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
    return r;
  }

  double det() const {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
};

/// Rotation quaternion, (w, x, y, z) with w first. q and -q encode the same
/// rotation; canonical form keeps w >= 0.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {1, 0, 0, 0}; }

  static Quaternion from_axis_angle(const Vec3& axis, double angle_rad) {
    Vec3 a = axis.normalized();
    double h = 0.5 * angle_rad;
    double s = std::sin(h);
    return {std::cos(h), a.x * s, a.y * s, a.z * s};
  }

  // Shoemake's subgroup algorithm: uniform over SO(3).
  static Quaternion random_uniform(Rng& rng) {
    double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    double s1 = std::sqrt(1.0 - u1), s2 = std::sqrt(u1);
    double a = 2.0 * 3.14159265358979323846 * u2;
    double b = 2.0 * 3.14159265358979323846 * u3;
    return {s1 * std::sin(a), s1 * std::cos(a), s2 * std::sin(b), s2 * std::cos(b)};
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    double n = norm();
    if (n < 1e-12) throw invalid_rotation_error("quaternion norm too small to normalize");
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion canonical() const {
    Quaternion q = normalized();
    if (q.w < 0.0) return {-q.w, -q.x, -q.y, -q.z};
    return q;
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  // Hamilton product; (a * b) rotates first by b, then by a.
  Quaternion operator*(const Quaternion& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  Vec3 rotate(const Vec3& v) const;
};

inline Mat3 quat_to_rotmat(const Quaternion& q_in) {
  Quaternion q = q_in.normalized();  // throws on near-zero norm
  double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r.m = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
          {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
          {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
  return r;
}

inline Vec3 Quaternion::rotate(const Vec3& v) const { return quat_to_rotmat(*this) * v; }

inline Quaternion rotmat_to_quat(const Mat3& r) {
  Mat3 gram = r.transposed() * r;
  double dev = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) dev = std::max(dev, std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)));
  if (dev > 1e-6) throw invalid_rotation_error("matrix is not orthonormal");
  if (r.det() < 0.0) throw invalid_rotation_error("matrix has negative determinant (reflection)");

  // Shepperd's method: pick the largest pivot for stability.
  double t = r(0, 0) + r(1, 1) + r(2, 2);
  Quaternion q;
  if (t > r(0, 0) && t > r(1, 1) && t > r(2, 2)) {
    double s = std::sqrt(1.0 + t) * 2.0;
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.canonical();
}

// Geodesic angle of the rotation taking a to b, in radians.
inline double rotation_angle_between(const Quaternion& a, const Quaternion& b) {
  Quaternion d = (b.normalized() * a.normalized().conjugate()).canonical();
  double w = std::min(1.0, std::max(-1.0, d.w));
  return 2.0 * std::acos(w);
}

/// Rigid transform: camera-frame pose of an object, translation in meters.
struct Pose {
  Quaternion rotation = Quaternion::identity();
  Vec3 translation{};

  static Pose identity() { return {}; }

  Mat3 rotation_matrix() const { return quat_to_rotmat(rotation); }

  Vec3 apply(const Vec3& p) const { return rotation_matrix() * p + translation; }

  // this ∘ other: apply `other` first, then `this`.
  Pose compose(const Pose& other) const {
    return {(rotation * other.rotation).normalized(), rotation_matrix() * other.translation + translation};
  }

  Pose inverse() const {
    Quaternion qi = rotation.conjugate().normalized();
    return {qi, (quat_to_rotmat(qi) * translation) * -1.0};
  }
};

/// Pinhole camera model, pixel units.
struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;
  double px = 0.0, py = 0.0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && px >= 0.0 && px < width && py >= 0.0 && py < height;
  }
};

/// Grid cell (i, j), 0-indexed with 0 <= i, j < S; i is the column (x), j the
/// row (y), so the cell's top-left corner in grid units is (i, j) itself.
struct CellIndex {
  int i = 0, j = 0;
  int grid_size = 1;
};

inline std::vector<Vec3> transform_points(const Pose& pose, const std::vector<Vec3>& pts) {
  Mat3 r = pose.rotation_matrix();
  std::vector<Vec3> out(pts.size());
  for (std::size_t k = 0; k < pts.size(); ++k) out[k] = r * pts[k] + pose.translation;
  return out;
}

inline Vec2 project_point(const Vec3& p, const CameraIntrinsics& k) {
  if (p.z <= 1e-9) throw behind_camera_error("point at or behind the camera plane");
  return {k.fx * p.x / p.z + k.px, k.fy * p.y / p.z + k.py};
}

inline std::vector<Vec2> project_points(const std::vector<Vec3>& pts_cam, const CameraIntrinsics& k) {
  std::vector<Vec2> out(pts_cam.size());
  for (std::size_t i = 0; i < pts_cam.size(); ++i) out[i] = project_point(pts_cam[i], k);
  return out;
}

// Full translation from predicted image center and depth:
//   tx = (cx - px) tz / fx,  ty = (cy - py) tz / fy.
inline Vec3 recover_translation(const Vec2& center, double tz, const CameraIntrinsics& k) {
  if (tz <= 0.0) throw invalid_depth_error("depth must be positive");
  return {(center.x - k.px) * tz / k.fx, (center.y - k.py) * tz / k.fy, tz};
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Cell-relative center decoding: the raw 2-vector is squashed into (0,1) and
// added to the cell's top-left corner, then scaled from grid to pixel units.
inline Vec2 decode_cell_center(const Vec2& raw, const CellIndex& cell, double image_size) {
  double scale = image_size / double(cell.grid_size);
  return {(sigmoid(raw.x) + double(cell.i)) * scale, (sigmoid(raw.y) + double(cell.j)) * scale};
}

// Applies a residual (dq, dc, dtz) to a pose: rotation is left-composed,
// the projected center is shifted in pixels, depth is offset, and the full
// translation is rebuilt from the camera intrinsics.
inline Pose compose_refinement(const Pose& pose, const Quaternion& dq, const Vec2& dc, double dtz,
                               const CameraIntrinsics& k) {
  double tz_new = pose.translation.z + dtz;
  if (tz_new <= 0.0) throw invalid_depth_error("refined depth is not positive");
  Vec2 center = project_point(pose.translation, k);
  Vec2 center_new = center + dc;
  Pose out;
  out.rotation = (dq.normalized() * pose.rotation).normalized();
  out.translation = recover_translation(center_new, tz_new, k);
  return out;
}

}  // namespace pose6d
