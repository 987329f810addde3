#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pose6d/geometry.hpp"
#include "pose6d/image.hpp"
#include "pose6d/model.hpp"

namespace pose6d {

/// Axis-aligned 2D box, [x0, x1] x [y0, y1] in pixel coordinates.
struct Box2 {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return std::max(0.0, x1 - x0); }
  double height() const { return std::max(0.0, y1 - y0); }
  double area() const { return width() * height(); }
};

inline double box_iou(const Box2& a, const Box2& b) {
  double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct RenderOutput {
  int width = 0, height = 0;
  Image rgb;                        // zero where mask = 0
  std::vector<double> depth;        // camera z in meters, +inf where empty
  std::vector<std::uint8_t> mask;   // 1 exactly where depth < +inf
};

struct CropPair {
  Image image_crop;                  // real image, masked to the padded bbox
  Image render_crop;
  std::vector<std::uint8_t> render_mask;
  Vec2 crop_origin;                  // top-left of the window in source pixels
};

// z-buffered target. Positions (model-frame point visible per pixel) are kept
// only when requested; they back the correspondence flow.
struct Framebuffer {
  int width = 0, height = 0;
  Image rgb;
  std::vector<double> depth;
  std::vector<std::uint8_t> mask;
  std::vector<int> object_id;
  bool keep_positions = false;
  std::vector<Vec3> position;

  Framebuffer(int w, int h, bool positions = false)
      : width(w),
        height(h),
        rgb(w, h),
        depth(std::size_t(w) * h, std::numeric_limits<double>::infinity()),
        mask(std::size_t(w) * h, 0),
        object_id(std::size_t(w) * h, 0),
        keep_positions(positions) {
    if (positions) position.resize(std::size_t(w) * h);
  }
};

inline Vec3 class_color(int id) {
  static const Vec3 palette[8] = {{0.85, 0.30, 0.25}, {0.25, 0.65, 0.85}, {0.35, 0.75, 0.35},
                                  {0.85, 0.70, 0.25}, {0.65, 0.40, 0.80}, {0.30, 0.75, 0.70},
                                  {0.80, 0.45, 0.60}, {0.55, 0.55, 0.35}};
  return palette[((id % 8) + 8) % 8];
}

namespace detail {

constexpr double kNearPlane = 1e-4;

struct ClipVertex {
  Vec3 cam;    // camera-space position
  Vec3 model;  // model-frame position (carried for correspondences)
};

// Sutherland-Hodgman against z = near. Returns 0, 3, or 4 vertices.
inline int clip_near(const ClipVertex in[3], ClipVertex out[4]) {
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    const ClipVertex& a = in[i];
    const ClipVertex& b = in[(i + 1) % 3];
    bool ain = a.cam.z >= kNearPlane;
    bool bin = b.cam.z >= kNearPlane;
    if (ain) out[n++] = a;
    if (ain != bin) {
      double t = (kNearPlane - a.cam.z) / (b.cam.z - a.cam.z);
      out[n++] = {a.cam + (b.cam - a.cam) * t, a.model + (b.model - a.model) * t};
    }
  }
  return n;
}

inline double orient2d(const Vec2& a, const Vec2& b, const Vec2& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// Top-left fill convention (y grows downward): a lattice-exact edge hit counts
// only on edges that go down, or horizontal edges that go left.
inline bool edge_top_left(const Vec2& a, const Vec2& b) {
  return (a.y == b.y && b.x < a.x) || (b.y > a.y);
}

inline void raster_triangle(Framebuffer& fb, const CameraIntrinsics& k, const ClipVertex& v0,
                            const ClipVertex& v1, const ClipVertex& v2, const Vec3& color,
                            int object_id) {
  Vec2 p0 = project_point(v0.cam, k);
  Vec2 p1 = project_point(v1.cam, k);
  Vec2 p2 = project_point(v2.cam, k);
  const ClipVertex* a = &v0;
  const ClipVertex* b = &v1;
  const ClipVertex* c = &v2;
  double area = orient2d(p0, p1, p2);
  if (area == 0.0) return;
  if (area < 0.0) {
    std::swap(b, c);
    std::swap(p1, p2);
    area = -area;
  }
  int x0 = std::max(0, int(std::floor(std::min({p0.x, p1.x, p2.x}) - 0.5)));
  int x1 = std::min(fb.width - 1, int(std::ceil(std::max({p0.x, p1.x, p2.x}))));
  int y0 = std::max(0, int(std::floor(std::min({p0.y, p1.y, p2.y}) - 0.5)));
  int y1 = std::min(fb.height - 1, int(std::ceil(std::max({p0.y, p1.y, p2.y}))));
  bool tl0 = edge_top_left(p1, p2);
  bool tl1 = edge_top_left(p2, p0);
  bool tl2 = edge_top_left(p0, p1);
  double iz0 = 1.0 / a->cam.z, iz1 = 1.0 / b->cam.z, iz2 = 1.0 / c->cam.z;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      Vec2 p{double(x) + 0.5, double(y) + 0.5};
      double w0 = orient2d(p1, p2, p);
      double w1 = orient2d(p2, p0, p);
      double w2 = orient2d(p0, p1, p);
      bool in0 = w0 > 0.0 || (w0 == 0.0 && tl0);
      bool in1 = w1 > 0.0 || (w1 == 0.0 && tl1);
      bool in2 = w2 > 0.0 || (w2 == 0.0 && tl2);
      if (!(in0 && in1 && in2)) continue;
      double l0 = w0 / area, l1 = w1 / area, l2 = w2 / area;
      double inv_z = l0 * iz0 + l1 * iz1 + l2 * iz2;
      double z = 1.0 / inv_z;
      std::size_t idx = std::size_t(y) * fb.width + x;
      if (z >= fb.depth[idx]) continue;
      fb.depth[idx] = z;
      fb.mask[idx] = 1;
      fb.object_id[idx] = object_id;
      fb.rgb.at(0, y, x) = color.x;
      fb.rgb.at(1, y, x) = color.y;
      fb.rgb.at(2, y, x) = color.z;
      if (fb.keep_positions) {
        Vec3 num = a->model * (l0 * iz0) + b->model * (l1 * iz1) + c->model * (l2 * iz2);
        fb.position[idx] = num * z;
      }
    }
  }
}

}  // namespace detail

// Flat Lambertian shade for a face with camera-space normal n.
inline double face_shade(const Vec3& normal_cam) {
  static const Vec3 light = Vec3{-0.3, -0.5, -1.0}.normalized();
  Vec3 n = normal_cam;
  if (n.z > 0.0) n = n * -1.0;  // two-sided: face the camera
  return 0.25 + 0.75 * std::max(0.0, n.dot(light));
}

inline void raster_object(Framebuffer& fb, const TriMesh& mesh, const Pose& pose,
                          const CameraIntrinsics& k, const Vec3& base_color, int object_id = 1) {
  Mat3 r = pose.rotation_matrix();
  std::vector<Vec3> cam(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
    cam[i] = r * mesh.vertices[i] + pose.translation;
  for (const auto& f : mesh.faces) {
    detail::ClipVertex tri[3] = {{cam[f[0]], mesh.vertices[f[0]]},
                                 {cam[f[1]], mesh.vertices[f[1]]},
                                 {cam[f[2]], mesh.vertices[f[2]]}};
    Vec3 n = (tri[1].cam - tri[0].cam).cross(tri[2].cam - tri[0].cam);
    double nn = n.norm();
    if (nn <= 0.0) continue;
    double shade = face_shade(n * (1.0 / nn));
    Vec3 color = base_color * shade;
    detail::ClipVertex clipped[4];
    int count = detail::clip_near(tri, clipped);
    for (int t = 2; t < count; ++t)
      detail::raster_triangle(fb, k, clipped[0], clipped[t - 1], clipped[t], color, object_id);
  }
}

inline RenderOutput to_render_output(Framebuffer&& fb) {
  RenderOutput out;
  out.width = fb.width;
  out.height = fb.height;
  out.rgb = std::move(fb.rgb);
  out.depth = std::move(fb.depth);
  out.mask = std::move(fb.mask);
  return out;
}

// Renders one model into a fresh size x size target (K's nominal size when
// size <= 0). An empty mesh yields an all-empty output.
inline RenderOutput rasterize(const ObjectModel& model, const Pose& pose,
                              const CameraIntrinsics& k, int size = 0) {
  int w = size > 0 ? size : k.width;
  int h = size > 0 ? size : k.height;
  Framebuffer fb(w, h);
  raster_object(fb, model.mesh, pose, k, class_color(model.id), model.id);
  return to_render_output(std::move(fb));
}

// Axis-aligned box over the projected sampled model points, padded then
// clipped to the image bounds.
inline Box2 projected_bbox(const ObjectModel& model, const Pose& pose, const CameraIntrinsics& k,
                           double pad) {
  std::vector<Vec3> cam = transform_points(pose, model.points);
  Box2 box{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : cam) {
    Vec2 uv = project_point(p, k);  // throws behind_camera_error on z <= 0
    box.x0 = std::min(box.x0, uv.x);
    box.y0 = std::min(box.y0, uv.y);
    box.x1 = std::max(box.x1, uv.x);
    box.y1 = std::max(box.y1, uv.y);
  }
  box.x0 = std::max(0.0, box.x0 - pad);
  box.y0 = std::max(0.0, box.y0 - pad);
  box.x1 = std::min(double(k.width), box.x1 + pad);
  box.y1 = std::min(double(k.height), box.y1 + pad);
  return box;
}

struct CropConfig {
  int width = 256, height = 256;
  double bbox_pad = 10.0;  // mask padding in pixels
};

// Paired crops for refinement: a window centered on the projected object
// center. The real-image crop keeps only pixels inside the padded projected
// bbox; the render crop views the model under `pose` through the same window.
inline CropPair make_input_crops(const Image& image, const ObjectModel& model, const Pose& pose,
                                 const CameraIntrinsics& k, const CropConfig& cfg = {}) {
  Vec2 center = project_point(pose.translation, k);
  if (center.x < 0.0 || center.x >= k.width || center.y < 0.0 || center.y >= k.height)
    throw out_of_view_error("projected object center outside the image");
  int ox = int(std::lround(center.x)) - cfg.width / 2;
  int oy = int(std::lround(center.y)) - cfg.height / 2;
  Box2 keep = projected_bbox(model, pose, k, cfg.bbox_pad);

  CropPair pair;
  pair.crop_origin = {double(ox), double(oy)};
  pair.image_crop = Image(cfg.width, cfg.height);
  for (int y = 0; y < cfg.height; ++y) {
    int sy = y + oy;
    if (sy < 0 || sy >= image.height) continue;
    for (int x = 0; x < cfg.width; ++x) {
      int sx = x + ox;
      if (sx < 0 || sx >= image.width) continue;
      double u = sx + 0.5, v = sy + 0.5;
      if (u < keep.x0 || u > keep.x1 || v < keep.y0 || v > keep.y1) continue;
      for (int c = 0; c < 3; ++c) pair.image_crop.at(c, y, x) = image.at(c, sy, sx);
    }
  }

  CameraIntrinsics kc = k;
  kc.px -= ox;
  kc.py -= oy;
  kc.width = cfg.width;
  kc.height = cfg.height;
  Framebuffer fb(cfg.width, cfg.height);
  raster_object(fb, model.mesh, pose, kc, class_color(model.id), model.id);
  pair.render_mask = fb.mask;
  pair.render_crop = std::move(fb.rgb);
  return pair;
}

/// Dense 2D displacement field on a crop window, with a validity mask.
struct FlowField {
  int width = 0, height = 0;
  std::vector<double> du, dv;        // displacement in pixels, zero where invalid
  std::vector<std::uint8_t> valid;
};

// Exact render-to-image correspondence flow on a crop window: for each crop
// pixel showing the object under pose_image, the displacement to where that
// same surface point falls when rendered under pose_render. Pixels that miss
// the object (or land behind the camera) carry zero flow.
inline FlowField correspondence_flow(const ObjectModel& model, const Pose& pose_render,
                                     const Pose& pose_image, const CameraIntrinsics& k,
                                     const Vec2& crop_origin, int width, int height) {
  CameraIntrinsics kc = k;
  kc.px -= crop_origin.x;
  kc.py -= crop_origin.y;
  kc.width = width;
  kc.height = height;
  Framebuffer fb(width, height, true);
  raster_object(fb, model.mesh, pose_image, kc, {1, 1, 1}, model.id);

  FlowField flow;
  flow.width = width;
  flow.height = height;
  flow.du.assign(std::size_t(width) * height, 0.0);
  flow.dv.assign(std::size_t(width) * height, 0.0);
  flow.valid.assign(std::size_t(width) * height, 0);
  Mat3 r = pose_render.rotation_matrix();
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      std::size_t idx = std::size_t(y) * width + x;
      if (!fb.mask[idx]) continue;
      Vec3 cam = r * fb.position[idx] + pose_render.translation;
      if (cam.z <= detail::kNearPlane) continue;
      Vec2 uv = project_point(cam, kc);
      flow.du[idx] = uv.x - (double(x) + 0.5);
      flow.dv[idx] = uv.y - (double(y) + 0.5);
      flow.valid[idx] = 1;
    }
  return flow;
}

inline void save_render(const std::string& prefix, const RenderOutput& render) {
  save_ppm(prefix + ".ppm", render.rgb);
  save_array_f64(prefix + ".depth", render.depth, render.height, render.width);
  save_array_u8(prefix + ".mask", render.mask, render.height, render.width);
}

}  // namespace pose6d
