#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <vector>

#include "pose6d/binio.hpp"
#include "pose6d/geometry.hpp"
#include "pose6d/model.hpp"
#include "pose6d/network.hpp"
#include "pose6d/renderer.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

struct PpnConfig {
  int image_size = 104;  // square input edge in pixels
  int grid = 13;         // S: cells per edge
  int classes = 3;       // C: object classes
  int d = 128;           // backbone embedding channels at grid resolution
};

// Per-cell, per-class proposals. Tensors are channel-major: conf is (C,S,S),
// quat (4C,S,S) with class c in channels 4c..4c+3 (w,x,y,z), center_raw
// (2C,S,S) as x/y logit pairs, tz (C,S,S) in meters. The *_raw companions
// keep pre-decode values so training can chain through the decode.
struct GridProposals {
  int grid = 0, classes = 0;
  int image_size = 0;
  Tensor conf;        // sigmoid outputs in [0,1]
  Tensor quat;        // identity-biased and unit-normalized
  Tensor center_raw;  // logits, squashed per Eq-style cell offset at decode
  Tensor tz;          // softplus of tz_raw, strictly positive
  Tensor quat_raw;
  Tensor tz_raw;
};

struct Detection {
  int class_index = 0;  // channel in the grid / index into the model list
  int class_id = 0;     // the matching ObjectModel::id
  Pose pose;
  double confidence = 0.0;
  CellIndex cell;
  Box2 bbox;
};

// Backbone with a pass-through seam plus the three decoder blocks. The stem
// runs to quarter resolution; `deep` continues to grid resolution while
// `pass` is a plain downsample of the stem output, concatenated back in so
// fine-grained detail reaches the decoders.
struct PpnNets {
  PpnConfig cfg;
  Network stem, deep, pass;
  Network dec_rot, dec_trans, dec_conf;
  int deep_channels = 0, pass_channels = 0;
};

inline PpnNets build_ppn_nets(const PpnConfig& cfg, Rng& rng) {
  if (cfg.grid <= 0 || cfg.classes <= 0) throw config_error("grid and classes must be positive");
  if (cfg.d % 8 != 0) throw config_error("backbone width must be divisible by 8");
  int halvings = 0;
  for (int size = cfg.image_size; size > cfg.grid; size /= 2) {
    if (size % 2 != 0) throw config_error("image size must be grid * 2^n");
    ++halvings;
  }
  if ((cfg.grid << halvings) != cfg.image_size || halvings < 3)
    throw config_error("image size must be grid * 2^n with n >= 3");

  PpnNets nets;
  nets.cfg = cfg;
  int c1 = cfg.d / 8, c2 = cfg.d / 4, mid = cfg.d / 2;
  nets.pass_channels = c2;
  nets.deep_channels = cfg.d - c2;

  nets.stem.add_conv2d(3, c1, 3, 1, 1).add_relu().add_maxpool2d(2);
  nets.stem.add_conv2d(c1, c2, 3, 1, 1).add_relu().add_maxpool2d(2);

  int ch = c2;
  for (int b = 0; b < halvings - 2; ++b) {
    nets.deep.add_conv2d(ch, mid, 3, 1, 1).add_relu().add_maxpool2d(2);
    ch = mid;
  }
  nets.deep.add_conv2d(ch, nets.deep_channels, 3, 1, 1).add_relu();

  nets.pass.add_maxpool2d(1 << (halvings - 2));

  nets.dec_rot.add_conv2d(cfg.d, mid, 3, 1, 1).add_relu().add_conv2d(mid, 4 * cfg.classes, 1);
  nets.dec_trans.add_conv2d(cfg.d, mid, 3, 1, 1).add_relu().add_conv2d(mid, 3 * cfg.classes, 1);
  nets.dec_conf.add_conv2d(cfg.d, mid, 3, 1, 1)
      .add_relu()
      .add_conv2d(mid, cfg.classes, 1)
      .add_sigmoid();

  nets.stem.init(rng);
  nets.deep.init(rng);
  nets.dec_rot.init(rng);
  nets.dec_trans.init(rng);
  nets.dec_conf.init(rng);
  return nets;
}

struct PpnTrace {
  Activations stem, deep, pass, rot, trans, conf;
};

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline GridProposals ppn_forward(const Tensor& image, PpnNets& nets, PpnTrace* trace = nullptr) {
  const PpnConfig& cfg = nets.cfg;
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size)
    throw config_error("ppn input must be (3, image_size, image_size)");
  PpnTrace local;
  PpnTrace& tr = trace ? *trace : local;
  Tensor mid = nets.stem.forward(image, tr.stem);
  Tensor deep_out = nets.deep.forward(mid, tr.deep);
  Tensor pass_out = nets.pass.forward(mid, tr.pass);
  Tensor features = concat_channels({deep_out, pass_out});
  Tensor rot = nets.dec_rot.forward(features, tr.rot);
  Tensor trans = nets.dec_trans.forward(features, tr.trans);

  GridProposals grids;
  grids.grid = cfg.grid;
  grids.classes = cfg.classes;
  grids.image_size = cfg.image_size;
  grids.conf = nets.dec_conf.forward(features, tr.conf);
  auto trans_parts = split_channels(trans, {2 * cfg.classes, cfg.classes});
  grids.center_raw = std::move(trans_parts[0]);
  grids.tz_raw = std::move(trans_parts[1]);
  grids.quat_raw = std::move(rot);

  int s = cfg.grid;
  grids.tz = Tensor({cfg.classes, s, s});
  for (std::size_t i = 0; i < grids.tz.numel(); ++i)
    grids.tz.data[i] = softplus(grids.tz_raw.data[i]);

  grids.quat = Tensor({4 * cfg.classes, s, s});
  for (int c = 0; c < cfg.classes; ++c)
    for (int j = 0; j < s; ++j)
      for (int i = 0; i < s; ++i) {
        double w = grids.quat_raw.at(4 * c + 0, j, i) + 1.0;  // identity bias
        double x = grids.quat_raw.at(4 * c + 1, j, i);
        double y = grids.quat_raw.at(4 * c + 2, j, i);
        double z = grids.quat_raw.at(4 * c + 3, j, i);
        double n = std::sqrt(w * w + x * x + y * y + z * z);
        if (n < 1e-12) {  // degenerate raw output: fall back to identity
          w = 1.0;
          x = y = z = 0.0;
          n = 1.0;
        }
        grids.quat.at(4 * c + 0, j, i) = w / n;
        grids.quat.at(4 * c + 1, j, i) = x / n;
        grids.quat.at(4 * c + 2, j, i) = y / n;
        grids.quat.at(4 * c + 3, j, i) = z / n;
      }
  return grids;
}

// Pushes loss gradients on the decoded grids back through the decoders, the
// pass-through seam, and the stem. Gradients arrive with respect to conf
// (post-sigmoid), quat_raw, center_raw, and tz_raw; parameter gradients
// accumulate into the networks.
inline void ppn_backward(PpnNets& nets, const PpnTrace& trace, const Tensor& d_conf,
                         const Tensor& d_quat_raw, const Tensor& d_center_raw,
                         const Tensor& d_tz_raw) {
  Tensor d_trans_out = concat_channels({d_center_raw, d_tz_raw});
  Tensor d_feat = nets.dec_conf.backward(d_conf, trace.conf);
  d_feat += nets.dec_rot.backward(d_quat_raw, trace.rot);
  d_feat += nets.dec_trans.backward(d_trans_out, trace.trans);
  auto parts = split_channels(d_feat, {nets.deep_channels, nets.pass_channels});
  Tensor d_mid = nets.deep.backward(parts[0], trace.deep);
  d_mid += nets.pass.backward(parts[1], trace.pass);
  nets.stem.backward(d_mid, trace.stem);
}

template <class F>
inline void ppn_for_each_param(PpnNets& nets, F fn) {
  nets.stem.for_each_param(fn);
  nets.deep.for_each_param(fn);
  nets.dec_rot.for_each_param(fn);
  nets.dec_trans.for_each_param(fn);
  nets.dec_conf.for_each_param(fn);
}

inline void ppn_zero_grad(PpnNets& nets) {
  nets.stem.zero_grad();
  nets.deep.zero_grad();
  nets.dec_rot.zero_grad();
  nets.dec_trans.zero_grad();
  nets.dec_conf.zero_grad();
}

// One detection per (cell, class) whose confidence clears the threshold.
// Proposals whose decoded depth is nonpositive or whose model projects
// partially behind the camera are dropped and counted.
inline std::vector<Detection> decode_proposals(const GridProposals& grids,
                                               const CameraIntrinsics& k,
                                               const std::vector<ObjectModel>& models,
                                               double conf_threshold, int* dropped = nullptr) {
  if (conf_threshold < 0.0 || conf_threshold > 1.0)
    throw config_error("confidence threshold must lie in [0,1]");
  if (int(models.size()) != grids.classes)
    throw config_error("model list does not match grid class count");
  if (dropped) *dropped = 0;
  std::vector<Detection> dets;
  int s = grids.grid;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i)
      for (int c = 0; c < grids.classes; ++c) {
        double conf = grids.conf.at(c, j, i);
        if (conf < conf_threshold) continue;
        double tz = grids.tz.at(c, j, i);
        if (tz <= 0.0) {
          if (dropped) ++*dropped;
          continue;
        }
        CellIndex cell{i, j, s};
        Vec2 raw{grids.center_raw.at(2 * c + 0, j, i), grids.center_raw.at(2 * c + 1, j, i)};
        Vec2 center = decode_cell_center(raw, cell, double(grids.image_size));
        Detection det;
        det.class_index = c;
        det.class_id = models[c].id;
        det.confidence = conf;
        det.cell = cell;
        det.pose.rotation = Quaternion{grids.quat.at(4 * c + 0, j, i),
                                       grids.quat.at(4 * c + 1, j, i),
                                       grids.quat.at(4 * c + 2, j, i),
                                       grids.quat.at(4 * c + 3, j, i)};
        det.pose.translation = recover_translation(center, tz, k);
        try {
          det.bbox = projected_bbox(models[c], det.pose, k, 0.0);
        } catch (const behind_camera_error&) {
          if (dropped) ++*dropped;
          continue;
        }
        dets.push_back(std::move(det));
      }
  return dets;
}

namespace detail {

// Deterministic ordering: confidence descending, then cell row, col, class.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.cell.j != b.cell.j) return a.cell.j < b.cell.j;
  if (a.cell.i != b.cell.i) return a.cell.i < b.cell.i;
  return a.class_index < b.class_index;
}

}  // namespace detail

// Greedy per-class suppression: walk detections by descending confidence,
// keep one unless it overlaps an already-kept detection of the same class
// beyond the threshold. Equivalent to repeated highest-first removal.
inline std::vector<Detection> nms_duplicates(const std::vector<Detection>& dets,
                                             double iou_threshold) {
  std::vector<Detection> sorted = dets;
  std::stable_sort(sorted.begin(), sorted.end(), detail::detection_before);
  std::vector<Detection> kept;
  for (const Detection& d : sorted) {
    bool suppressed = false;
    for (const Detection& keep : kept)
      if (keep.class_index == d.class_index && box_iou(keep.bbox, d.bbox) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

inline void write_ppn_nets(std::ostream& out, const PpnNets& nets) {
  binio::write_i32(out, nets.cfg.image_size);
  binio::write_i32(out, nets.cfg.grid);
  binio::write_i32(out, nets.cfg.classes);
  binio::write_i32(out, nets.cfg.d);
  write_network(out, nets.stem);
  write_network(out, nets.deep);
  write_network(out, nets.pass);
  write_network(out, nets.dec_rot);
  write_network(out, nets.dec_trans);
  write_network(out, nets.dec_conf);
}

inline PpnNets read_ppn_nets(std::istream& in) {
  PpnNets nets;
  nets.cfg.image_size = binio::read_i32(in);
  nets.cfg.grid = binio::read_i32(in);
  nets.cfg.classes = binio::read_i32(in);
  nets.cfg.d = binio::read_i32(in);
  nets.pass_channels = nets.cfg.d / 4;
  nets.deep_channels = nets.cfg.d - nets.pass_channels;
  nets.stem = read_network(in);
  nets.deep = read_network(in);
  nets.pass = read_network(in);
  nets.dec_rot = read_network(in);
  nets.dec_trans = read_network(in);
  nets.dec_conf = read_network(in);
  return nets;
}

struct ClassPose {
  int class_index = 0;
  Pose pose;
};

// Binary (C,S,S) grid marking the cell that contains each projected
// ground-truth center. Centers that project outside the image are skipped
// and counted.
inline Tensor confidence_target(const std::vector<ClassPose>& gts, const CameraIntrinsics& k,
                                int grid, int classes, int* skipped = nullptr) {
  if (grid <= 0 || classes <= 0) throw config_error("grid and classes must be positive");
  if (skipped) *skipped = 0;
  Tensor target({classes, grid, grid});
  for (const auto& gt : gts) {
    if (gt.class_index < 0 || gt.class_index >= classes)
      throw config_error("ground-truth class outside the configured class set");
    Vec2 uv;
    try {
      uv = project_point(gt.pose.translation, k);
    } catch (const behind_camera_error&) {
      if (skipped) ++*skipped;
      continue;
    }
    if (uv.x < 0.0 || uv.x >= double(k.width) || uv.y < 0.0 || uv.y >= double(k.height)) {
      if (skipped) ++*skipped;
      continue;
    }
    int i = int(std::floor(uv.x * grid / double(k.width)));
    int j = int(std::floor(uv.y * grid / double(k.height)));
    target.at(gt.class_index, j, i) = 1.0;
  }
  return target;
}

}  // namespace pose6d
