#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pose6d/errors.hpp"
#include "pose6d/geometry.hpp"
#include "pose6d/random.hpp"

namespace pose6d {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;  // indices into vertices
};

/// A known rigid object: its mesh, a sampled surface point set, the maximum
/// pairwise point distance (diameter), and its discrete symmetry transforms.
struct ObjectModel {
  int id = 0;  // class index, 1-based
  std::vector<Vec3> points;
  TriMesh mesh;
  double diameter = 0.0;
  std::vector<Pose> symmetries;  // identity always included (first)
  bool is_symmetric = false;
};

inline double compute_diameter(const std::vector<Vec3>& pts) {
  double best = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      Vec3 d = pts[i] - pts[j];
      best = std::max(best, d.dot(d));
    }
  return std::sqrt(best);
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return (b - a).cross(c - a).norm() * 0.5;
}

// All mesh vertices plus area-weighted random surface samples up to
// max(target, vertex count) points. Deterministic for a given seed.
inline std::vector<Vec3> sample_surface_points(const TriMesh& mesh, int target,
                                               std::uint64_t seed = 0x5a17u) {
  std::vector<Vec3> pts = mesh.vertices;
  if (mesh.faces.empty() || int(pts.size()) >= target) return pts;
  std::vector<double> cum;
  cum.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cum.push_back(total);
  }
  if (total <= 0.0) return pts;
  Rng rng(seed);
  while (int(pts.size()) < target) {
    double r = rng.uniform() * total;
    std::size_t fi = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
    if (fi >= mesh.faces.size()) fi = mesh.faces.size() - 1;
    const auto& f = mesh.faces[fi];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    pts.push_back(a + (b - a) * u + (c - a) * v);
  }
  return pts;
}

inline ObjectModel make_object_model(int id, TriMesh mesh, int sample_count,
                                     std::vector<Pose> symmetries = {}) {
  ObjectModel m;
  m.id = id;
  m.mesh = std::move(mesh);
  m.points = sample_surface_points(m.mesh, sample_count);
  if (m.points.size() < 4) throw data_error("object model needs at least 4 surface points");
  m.diameter = compute_diameter(m.points);
  m.symmetries.push_back(Pose::identity());
  for (const auto& s : symmetries) {
    bool is_id = std::abs(s.rotation.canonical().w - 1.0) < 1e-12 && s.translation.norm() < 1e-12;
    if (!is_id) m.symmetries.push_back(s);
  }
  m.is_symmetric = m.symmetries.size() > 1;
  return m;
}

// ---------------------------------------------------------------------------
// Procedural meshes (all origin-centered)
// ---------------------------------------------------------------------------

inline TriMesh make_cube_mesh(double edge) {
  double h = edge * 0.5;
  TriMesh m;
  m.vertices = {{-h, -h, -h}, {h, -h, -h}, {h, h, -h}, {-h, h, -h},
                {-h, -h, h},  {h, -h, h},  {h, h, h},  {-h, h, h}};
  m.faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
             {2, 3, 7}, {2, 7, 6}, {1, 2, 6}, {1, 6, 5}, {3, 0, 4}, {3, 4, 7}};
  return m;
}

inline TriMesh make_tetrahedron_mesh(double edge) {
  // Regular tetrahedron centered at its centroid.
  double s = edge / std::sqrt(8.0 / 3.0);  // circumradius-ish scale for unit coords below
  TriMesh m;
  m.vertices = {{s, s, s}, {s, -s, -s}, {-s, s, -s}, {-s, -s, s}};
  double scale = edge / (m.vertices[0] - m.vertices[1]).norm();
  for (auto& v : m.vertices) v = v * scale;
  m.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  return m;
}

inline TriMesh make_lprism_mesh(double size, double thickness, double depth) {
  // L-shaped cross-section in the xy plane, extruded along z, centered.
  double s = size, t = thickness, d = depth * 0.5;
  std::vector<Vec2> poly = {{0, 0}, {s, 0}, {s, t}, {t, t}, {t, s}, {0, s}};
  Vec2 c{0, 0};
  for (const auto& p : poly) c = c + p;
  c = c * (1.0 / double(poly.size()));
  TriMesh m;
  for (int side = 0; side < 2; ++side) {
    double z = side == 0 ? -d : d;
    for (const auto& p : poly) m.vertices.push_back({p.x - c.x, p.y - c.y, z});
  }
  int n = int(poly.size());
  // caps (L is concave; fan from the inner corner vertex 3 stays inside)
  for (int i = 0; i < n; ++i) {
    int a = 3, b = i, cc = (i + 1) % n;
    if (b == a || cc == a) continue;
    m.faces.push_back({a, cc, b});           // bottom (z<0), wound to face -z
    m.faces.push_back({n + a, n + b, n + cc});  // top, faces +z
  }
  for (int i = 0; i < n; ++i) {
    int j = (i + 1) % n;
    m.faces.push_back({i, j, n + j});
    m.faces.push_back({i, n + j, n + i});
  }
  return m;
}

inline TriMesh make_icosphere_mesh(double radius, int subdivisions = 1) {
  double phi = (1.0 + std::sqrt(5.0)) * 0.5;
  std::vector<Vec3> v = {{-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
                         {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
                         {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  std::vector<std::array<int, 3>> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int iter = 0; iter < subdivisions; ++iter) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back(((v[a] + v[b]) * 0.5));
      midpoint[key] = int(v.size()) - 1;
      return int(v.size()) - 1;
    };
    std::vector<std::array<int, 3>> nf;
    for (const auto& t : f) {
      int m01 = mid(t[0], t[1]), m12 = mid(t[1], t[2]), m02 = mid(t[0], t[2]);
      nf.push_back({t[0], m01, m02});
      nf.push_back({t[1], m12, m01});
      nf.push_back({t[2], m02, m12});
      nf.push_back({m01, m12, m02});
    }
    f = std::move(nf);
  }
  TriMesh m;
  for (const auto& p : v) m.vertices.push_back(p.normalized() * radius);
  m.faces = f;
  return m;
}

// ---------------------------------------------------------------------------
// Symmetry groups
// ---------------------------------------------------------------------------

// The 24 proper rotations of a cube: signed permutation matrices with det +1.
inline std::vector<Pose> cube_symmetries() {
  std::vector<Pose> out;
  int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (auto& p : perms)
    for (int sx = -1; sx <= 1; sx += 2)
      for (int sy = -1; sy <= 1; sy += 2)
        for (int sz = -1; sz <= 1; sz += 2) {
          Mat3 r;
          r.m = {{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};
          int sign[3] = {sx, sy, sz};
          for (int row = 0; row < 3; ++row) r(row, p[row]) = double(sign[row]);
          if (r.det() > 0.5) out.push_back({rotmat_to_quat(r), {}});
        }
  return out;
}

// Proper symmetries of a vertex set: rotations that permute the vertices.
// Closure of a generator set, deduplicated up to quaternion sign.
inline std::vector<Pose> closure_of_rotations(std::vector<Quaternion> gens, int max_count = 256) {
  std::vector<Quaternion> group = {Quaternion::identity()};
  auto contains = [&](const Quaternion& q) {
    Quaternion c = q.canonical();
    for (const auto& g : group) {
      Quaternion gc = g.canonical();
      double d = std::abs(gc.w - c.w) + std::abs(gc.x - c.x) + std::abs(gc.y - c.y) +
                 std::abs(gc.z - c.z);
      if (d < 1e-6) return true;
    }
    return false;
  };
  for (const auto& g : gens)
    if (!contains(g)) group.push_back(g.normalized());
  bool grew = true;
  while (grew && int(group.size()) < max_count) {
    grew = false;
    std::size_t n = group.size();
    for (std::size_t i = 0; i < n && int(group.size()) < max_count; ++i)
      for (std::size_t j = 0; j < n && int(group.size()) < max_count; ++j) {
        Quaternion p = (group[i] * group[j]).normalized();
        if (!contains(p)) {
          group.push_back(p);
          grew = true;
        }
      }
  }
  std::vector<Pose> out;
  for (const auto& q : group) out.push_back({q.canonical(), {}});
  return out;
}

inline std::vector<Pose> tetrahedron_symmetries(const TriMesh& tetra) {
  // 3-fold about a vertex axis, 2-fold about an opposite-edge-midpoints axis.
  const Vec3 centroid{};  // centered construction
  Vec3 v0 = tetra.vertices[0] - centroid;
  Vec3 e = ((tetra.vertices[0] + tetra.vertices[1]) * 0.5) - centroid;
  std::vector<Quaternion> gens = {
      Quaternion::from_axis_angle(v0, 2.0 * 3.14159265358979323846 / 3.0),
      Quaternion::from_axis_angle(e, 3.14159265358979323846)};
  return closure_of_rotations(gens, 16);  // A4 has 12 elements
}

inline std::vector<Pose> icosahedral_symmetries() {
  double phi = (1.0 + std::sqrt(5.0)) * 0.5;
  Vec3 vertex{-1, phi, 0};      // 5-fold axis
  Vec3 edge_mid{0, phi, 0};     // midpoint of vertices 0 and 1: 2-fold axis
  std::vector<Quaternion> gens = {
      Quaternion::from_axis_angle(vertex, 2.0 * 3.14159265358979323846 / 5.0),
      Quaternion::from_axis_angle(edge_mid, 3.14159265358979323846)};
  return closure_of_rotations(gens, 64);  // rotation group has 60 elements
}

// Discrete approximation of a continuous symmetry about an axis.
inline std::vector<Pose> axis_symmetries(const Vec3& axis, int count = 64) {
  std::vector<Pose> out;
  for (int i = 1; i < count; ++i) {
    double a = 2.0 * 3.14159265358979323846 * double(i) / double(count);
    out.push_back({Quaternion::from_axis_angle(axis, a), {}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Built-in object set
// ---------------------------------------------------------------------------

enum class ShapeKind { Cube, Tetrahedron, LPrism, Icosphere };

inline ShapeKind shape_kind_from_name(const std::string& name) {
  if (name == "cube") return ShapeKind::Cube;
  if (name == "tetra" || name == "tetrahedron") return ShapeKind::Tetrahedron;
  if (name == "lprism") return ShapeKind::LPrism;
  if (name == "icosphere" || name == "sphere") return ShapeKind::Icosphere;
  throw config_error("unknown shape name: " + name);
}

inline ObjectModel make_shape(ShapeKind kind, int id, int sample_count, double scale = 0.1) {
  switch (kind) {
    case ShapeKind::Cube: {
      TriMesh mesh = make_cube_mesh(scale);
      return make_object_model(id, mesh, sample_count, cube_symmetries());
    }
    case ShapeKind::Tetrahedron: {
      TriMesh mesh = make_tetrahedron_mesh(scale);
      return make_object_model(id, mesh, sample_count, tetrahedron_symmetries(mesh));
    }
    case ShapeKind::LPrism:
      return make_object_model(id, make_lprism_mesh(scale, scale * 0.4, scale * 0.5), sample_count);
    case ShapeKind::Icosphere:
      return make_object_model(id, make_icosphere_mesh(scale * 0.5, 1), sample_count,
                               icosahedral_symmetries());
  }
  throw config_error("unreachable shape kind");
}

// ---------------------------------------------------------------------------
// Minimal OBJ subset: v/f lines, triangles only. Symmetries ride along as
// structured comments ("# sym: w x y z tx ty tz"), identity implied.
// ---------------------------------------------------------------------------

inline void save_obj(const std::string& path, const ObjectModel& model) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.precision(17);
  for (std::size_t i = 1; i < model.symmetries.size(); ++i) {
    const Pose& s = model.symmetries[i];
    out << "# sym: " << s.rotation.w << " " << s.rotation.x << " " << s.rotation.y << " "
        << s.rotation.z << " " << s.translation.x << " " << s.translation.y << " "
        << s.translation.z << "\n";
  }
  for (const auto& v : model.mesh.vertices) out << "v " << v.x << " " << v.y << " " << v.z << "\n";
  for (const auto& f : model.mesh.faces)
    out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
}

inline ObjectModel load_obj(const std::string& path, int id, int sample_count) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open: " + path);
  TriMesh mesh;
  std::vector<Pose> syms;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tok;
    if (!(ss >> tok)) continue;
    if (tok == "v") {
      Vec3 v;
      if (!(ss >> v.x >> v.y >> v.z))
        throw data_error(path + ":" + std::to_string(lineno) + ": malformed vertex");
      mesh.vertices.push_back(v);
    } else if (tok == "f") {
      std::array<int, 3> f{};
      for (int k = 0; k < 3; ++k) {
        std::string idx;
        if (!(ss >> idx)) throw data_error(path + ":" + std::to_string(lineno) + ": face needs 3 indices");
        std::size_t slash = idx.find('/');
        int vi = std::stoi(slash == std::string::npos ? idx : idx.substr(0, slash));
        if (vi < 1 || vi > int(mesh.vertices.size()))
          throw data_error(path + ":" + std::to_string(lineno) + ": vertex index out of range");
        f[k] = vi - 1;
      }
      std::string extra;
      if (ss >> extra) throw data_error(path + ":" + std::to_string(lineno) + ": only triangles supported");
      mesh.faces.push_back(f);
    } else if (tok == "#") {
      std::string tag;
      if (ss >> tag && tag == "sym:") {
        Pose s;
        if (ss >> s.rotation.w >> s.rotation.x >> s.rotation.y >> s.rotation.z >>
            s.translation.x >> s.translation.y >> s.translation.z)
          syms.push_back(s);
      }
    }
    // other line kinds ignored
  }
  return make_object_model(id, std::move(mesh), sample_count, syms);
}

}  // namespace pose6d
