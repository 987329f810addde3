#pragma once

#include <array>
#include <cmath>
#include <iostream>
#include <utility>
#include <vector>

#include "pose6d/binio.hpp"
#include "pose6d/geometry.hpp"
#include "pose6d/losses.hpp"
#include "pose6d/model.hpp"
#include "pose6d/network.hpp"
#include "pose6d/renderer.hpp"
#include "pose6d/tensor.hpp"
#include "pose6d/warp.hpp"

namespace pose6d {

// Refiner variants, mirroring the ablation ladder: V1 fuses the two visual
// embeddings directly, V2 adds flow and warping, V3 adds a single attention
// map, V4 is the full multi-attention refiner.
enum class MarnVariant : int { V1 = 1, V2 = 2, V3 = 3, V4 = 4 };

enum class FlowMode : int {
  Oracle = 0,   // exact correspondence field from the renderer (needs ground truth)
  Learned = 1,  // small encoder-decoder flow network on the crop pair
};

struct MarnConfig {
  int crop = 64;            // H = W of the input crops, divisible by 8
  int d_em = 8;             // visual embedding channels
  int attention_maps = 4;   // N for the V4 variant
  MarnVariant variant = MarnVariant::V4;
  FlowMode flow_mode = FlowMode::Oracle;
  double dc_bound = 64.0;   // tanh bound on the predicted center shift, pixels
  double bbox_pad = 10.0;   // mask padding for the image crop, pixels

  int n_maps() const {
    if (variant == MarnVariant::V3) return 1;
    if (variant == MarnVariant::V4) return attention_maps;
    return 0;
  }

  int fused_channels() const {
    switch (variant) {
      case MarnVariant::V1:
        return 2 * d_em;
      case MarnVariant::V2:
        return 2 * d_em + 2;
      default:
        return (d_em + 2) * n_maps();
    }
  }
};

/// Relative pose correction: left-composed rotation, center shift in source
/// image pixels, and depth offset.
struct ResidualPose {
  Quaternion dq;
  Vec2 dc;
  double dtz = 0.0;
};

/// Spatial attention maps (N, H, W): nonnegative, each summing to 1.
struct AttentionStack {
  Tensor maps;
};

struct MarnNets {
  MarnConfig cfg;
  Network embed;      // shared between both crops
  Network flow;       // learned-flow mode only
  Network att;        // two 1x1 convolutions producing the summarized maps
  Network head;       // three 3x3 convolutions down to 8 channels
  Network fc_shared;  // one shared fully-connected layer
  Network fc_rot;     // 4-dim raw quaternion head
  Network fc_trans;   // 3-dim (dc_x, dc_y, dtz) head
};

inline MarnNets build_marn_nets(const MarnConfig& cfg, Rng& rng) {
  if (cfg.crop <= 0 || cfg.crop % 8 != 0) throw config_error("crop size must be divisible by 8");
  if (cfg.d_em <= 0) throw config_error("embedding size must be positive");
  if (cfg.variant == MarnVariant::V4 && cfg.attention_maps < 1)
    throw config_error("multi-attention variant needs at least one map");
  MarnNets nets;
  nets.cfg = cfg;

  int e1 = std::max(8, cfg.d_em);
  nets.embed.add_conv2d(3, e1, 3, 1, 1).add_relu();
  nets.embed.add_conv2d(e1, e1, 3, 1, 1).add_relu();
  nets.embed.add_conv2d(e1, cfg.d_em, 1);

  nets.flow.add_conv2d(6, 8, 3, 1, 1).add_relu().add_maxpool2d(2);
  nets.flow.add_conv2d(8, 16, 3, 1, 1).add_relu().add_maxpool2d(2);
  nets.flow.add_conv2d(16, 16, 3, 1, 1).add_relu().add_upsample2x();
  nets.flow.add_conv2d(16, 8, 3, 1, 1).add_relu().add_upsample2x();
  nets.flow.add_conv2d(8, 2, 3, 1, 1);

  if (cfg.n_maps() > 0) {
    nets.att.add_conv2d(cfg.d_em, cfg.d_em, 1).add_relu();
    nets.att.add_conv2d(cfg.d_em, cfg.n_maps(), 1);
  }

  int side = cfg.crop / 8;
  nets.head.add_conv2d(cfg.fused_channels(), 16, 3, 2, 1).add_relu();
  nets.head.add_conv2d(16, 16, 3, 2, 1).add_relu();
  nets.head.add_conv2d(16, 8, 3, 2, 1).add_relu();
  nets.fc_shared.add_fully_connected(8 * side * side, 64).add_relu();
  nets.fc_rot.add_fully_connected(64, 4);
  nets.fc_trans.add_fully_connected(64, 3);

  nets.embed.init(rng);
  nets.flow.init(rng);
  nets.att.init(rng);
  nets.head.init(rng);
  nets.fc_shared.init(rng);
  nets.fc_rot.init(rng);
  nets.fc_trans.init(rng);
  return nets;
}

/// Per-channel softmax over the spatial extent: each map becomes a
/// distribution over pixels.
inline Tensor spatial_softmax(const Tensor& s) {
  if (s.rank() != 3) throw config_error("spatial_softmax expects (N,H,W)");
  Tensor a(s.shape);
  std::size_t hw = std::size_t(s.dim(1)) * s.dim(2);
  for (int i = 0; i < s.dim(0); ++i) {
    const double* src = &s.data[i * hw];
    double* dst = &a.data[i * hw];
    double peak = src[0];
    for (std::size_t p = 1; p < hw; ++p) peak = std::max(peak, src[p]);
    double sum = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      dst[p] = std::exp(src[p] - peak);
      sum += dst[p];
    }
    for (std::size_t p = 0; p < hw; ++p) dst[p] /= sum;
  }
  return a;
}

// dL/ds for a = spatial_softmax(s): a ⊙ (g − <a, g>) per map.
inline Tensor spatial_softmax_backward(const Tensor& a, const Tensor& grad_a) {
  if (!a.same_shape(grad_a)) throw config_error("softmax gradient shape mismatch");
  Tensor ds(a.shape);
  std::size_t hw = std::size_t(a.dim(1)) * a.dim(2);
  for (int i = 0; i < a.dim(0); ++i) {
    const double* ai = &a.data[i * hw];
    const double* gi = &grad_a.data[i * hw];
    double inner = 0.0;
    for (std::size_t p = 0; p < hw; ++p) inner += ai[p] * gi[p];
    double* di = &ds.data[i * hw];
    for (std::size_t p = 0; p < hw; ++p) di[p] = ai[p] * (gi[p] - inner);
  }
  return ds;
}

// F̄: each attention map is broadcast across the channels of F_im_plus and
// multiplied in; the N weighted copies are concatenated channel-wise.
inline Tensor attend(const Tensor& f_im_plus, const AttentionStack& attention) {
  const Tensor& a = attention.maps;
  if (f_im_plus.rank() != 3 || a.rank() != 3 || a.dim(1) != f_im_plus.dim(1) ||
      a.dim(2) != f_im_plus.dim(2))
    throw config_error("attend inputs must share spatial extent");
  int n = a.dim(0), dp = f_im_plus.dim(0);
  std::size_t hw = std::size_t(a.dim(1)) * a.dim(2);
  Tensor out({n * dp, f_im_plus.dim(1), f_im_plus.dim(2)});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dp; ++c) {
      const double* ai = &a.data[i * hw];
      const double* fc = &f_im_plus.data[c * hw];
      double* oc = &out.data[(std::size_t(i) * dp + c) * hw];
      for (std::size_t p = 0; p < hw; ++p) oc[p] = ai[p] * fc[p];
    }
  return out;
}

struct AttendGrads {
  Tensor d_features;   // dL/dF_im_plus
  Tensor d_attention;  // dL/da
};

inline AttendGrads attend_backward(const Tensor& f_im_plus, const AttentionStack& attention,
                                   const Tensor& grad_out) {
  const Tensor& a = attention.maps;
  int n = a.dim(0), dp = f_im_plus.dim(0);
  std::size_t hw = std::size_t(a.dim(1)) * a.dim(2);
  AttendGrads g{Tensor(f_im_plus.shape), Tensor(a.shape)};
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dp; ++c) {
      const double* ai = &a.data[i * hw];
      const double* fc = &f_im_plus.data[c * hw];
      const double* go = &grad_out.data[(std::size_t(i) * dp + c) * hw];
      double* df = &g.d_features.data[c * hw];
      double* da = &g.d_attention.data[i * hw];
      for (std::size_t p = 0; p < hw; ++p) {
        df[p] += ai[p] * go[p];
        da[p] += fc[p] * go[p];
      }
    }
  return g;
}

inline Tensor flow_field_to_tensor(const FlowField& field) {
  Tensor t({2, field.height, field.width});
  std::size_t hw = std::size_t(field.height) * field.width;
  std::copy(field.du.begin(), field.du.end(), t.data.begin());
  std::copy(field.dv.begin(), field.dv.end(), t.data.begin() + hw);
  return t;
}

struct MarnTrace {
  Activations embed_im, embed_r, flow_acts, att_acts;
  Activations head_acts, fc_shared_acts, fc_rot_acts, fc_trans_acts;
  Tensor f_im, f_r, flow;
  Tensor f_w, f_im_plus;
  AttentionStack attention;
  Tensor quat_raw, trans_raw;  // (4) and (3) head outputs
};

struct ExtractResult {
  Tensor f_im, f_r, flow;
};

// Runs the shared embedding on both crops and produces the flow field:
// supplied by the renderer oracle, predicted by the flow network, or zero for
// the visual-only variant.
inline ExtractResult extract_features(const CropPair& crops, MarnNets& nets, MarnTrace& trace,
                                      const Tensor* oracle_flow = nullptr) {
  const MarnConfig& cfg = nets.cfg;
  Tensor t_im = image_to_tensor(crops.image_crop);
  Tensor t_r = image_to_tensor(crops.render_crop);
  if (t_im.dim(1) != cfg.crop || t_im.dim(2) != cfg.crop || !t_im.same_shape(t_r))
    throw config_error("crop pair does not match the configured crop size");
  ExtractResult out;
  out.f_im = nets.embed.forward(t_im, trace.embed_im);
  out.f_r = nets.embed.forward(t_r, trace.embed_r);
  if (cfg.variant == MarnVariant::V1) {
    out.flow = Tensor({2, cfg.crop, cfg.crop});
  } else if (cfg.flow_mode == FlowMode::Oracle) {
    if (!oracle_flow) throw state_error("oracle flow mode needs a correspondence field");
    if (oracle_flow->rank() != 3 || oracle_flow->dim(0) != 2 ||
        oracle_flow->dim(1) != cfg.crop || oracle_flow->dim(2) != cfg.crop)
      throw config_error("oracle flow must be (2, crop, crop)");
    out.flow = *oracle_flow;
  } else {
    out.flow = nets.flow.forward(concat_channels({t_im, t_r}), trace.flow_acts);
  }
  trace.f_im = out.f_im;
  trace.f_r = out.f_r;
  trace.flow = out.flow;
  return out;
}

struct FuseResult {
  Tensor f_w;        // render features aligned to the image grid
  Tensor f_im_plus;  // image features with the flow appended
};

inline FuseResult fuse_features(const Tensor& f_im, const Tensor& f_r, const Tensor& flow) {
  FuseResult out;
  out.f_w = bilinear_warp(f_r, flow);
  out.f_im_plus = concat_channels({f_im, flow});
  return out;
}

inline AttentionStack attention_maps(const Tensor& f_w, MarnNets& nets, MarnTrace& trace) {
  if (nets.cfg.n_maps() < 1) throw config_error("this variant has no attention block");
  Tensor s = nets.att.forward(f_w, trace.att_acts);
  return AttentionStack{spatial_softmax(s)};
}

struct MarnForward {
  ResidualPose residual;
  Tensor quat_raw, trans_raw;
  AttentionStack attention;  // empty maps for V1/V2
};

namespace detail {

inline ResidualPose decode_residual(const Tensor& quat_raw, const Tensor& trans_raw,
                                    double dc_bound) {
  ResidualPose res;
  Quaternion q{quat_raw.at(0) + 1.0, quat_raw.at(1), quat_raw.at(2), quat_raw.at(3)};
  res.dq = q.norm() < 1e-12 ? Quaternion::identity() : q.normalized();
  res.dc = {dc_bound * std::tanh(trans_raw.at(0)), dc_bound * std::tanh(trans_raw.at(1))};
  res.dtz = trans_raw.at(2);
  return res;
}

}  // namespace detail

// The residual block alone: three stride-2 convolutions, the shared FC, and
// the two output heads.
inline ResidualPose residual_head(const Tensor& f_bar, MarnNets& nets, MarnTrace& trace) {
  Tensor h = nets.head.forward(f_bar, trace.head_acts);
  Tensor shared = nets.fc_shared.forward(h, trace.fc_shared_acts);
  trace.quat_raw = nets.fc_rot.forward(shared, trace.fc_rot_acts);
  trace.trans_raw = nets.fc_trans.forward(shared, trace.fc_trans_acts);
  return detail::decode_residual(trace.quat_raw, trace.trans_raw, nets.cfg.dc_bound);
}

// Full refiner forward pass for the configured variant. The trace keeps every
// seam tensor so marn_backward can replay the composition.
inline MarnForward marn_forward(const CropPair& crops, MarnNets& nets, MarnTrace& trace,
                                const Tensor* oracle_flow = nullptr) {
  const MarnConfig& cfg = nets.cfg;
  ExtractResult ex = extract_features(crops, nets, trace, oracle_flow);
  Tensor fused;
  switch (cfg.variant) {
    case MarnVariant::V1:
      fused = concat_channels({ex.f_im, ex.f_r});
      break;
    case MarnVariant::V2: {
      FuseResult fu = fuse_features(ex.f_im, ex.f_r, ex.flow);
      trace.f_w = fu.f_w;
      trace.f_im_plus = fu.f_im_plus;
      fused = concat_channels({fu.f_im_plus, fu.f_w});
      break;
    }
    default: {
      FuseResult fu = fuse_features(ex.f_im, ex.f_r, ex.flow);
      trace.f_w = fu.f_w;
      trace.f_im_plus = fu.f_im_plus;
      trace.attention = attention_maps(fu.f_w, nets, trace);
      fused = attend(fu.f_im_plus, trace.attention);
      break;
    }
  }
  MarnForward out;
  out.residual = residual_head(fused, nets, trace);
  out.quat_raw = trace.quat_raw;
  out.trans_raw = trace.trans_raw;
  out.attention = trace.attention;
  return out;
}

// Backward through the refiner. Gradients arrive on the raw head outputs;
// d_attention_extra (optional, (N,H,W)) adds a loss term taken directly on
// the attention maps — the orthogonality regularizer enters here. Parameter
// gradients accumulate into the networks; the shared embedding receives both
// crops' contributions.
inline void marn_backward(MarnNets& nets, const MarnTrace& trace, const Tensor& d_quat_raw,
                          const Tensor& d_trans_raw, const Tensor* d_attention_extra = nullptr) {
  const MarnConfig& cfg = nets.cfg;
  Tensor d_shared = nets.fc_rot.backward(d_quat_raw, trace.fc_rot_acts);
  d_shared += nets.fc_trans.backward(d_trans_raw, trace.fc_trans_acts);
  Tensor d_head_out = nets.fc_shared.backward(d_shared, trace.fc_shared_acts);
  Tensor d_fused = nets.head.backward(d_head_out, trace.head_acts);

  Tensor d_f_im, d_f_r, d_flow;
  switch (cfg.variant) {
    case MarnVariant::V1: {
      auto parts = split_channels(d_fused, {cfg.d_em, cfg.d_em});
      d_f_im = std::move(parts[0]);
      d_f_r = std::move(parts[1]);
      break;
    }
    case MarnVariant::V2: {
      auto parts = split_channels(d_fused, {cfg.d_em + 2, cfg.d_em});
      Tensor d_f_im_plus = std::move(parts[0]);
      WarpGrads wg = bilinear_warp_backward(trace.f_r, trace.flow, parts[1]);
      d_f_r = std::move(wg.features);
      auto plus_parts = split_channels(d_f_im_plus, {cfg.d_em, 2});
      d_f_im = std::move(plus_parts[0]);
      d_flow = std::move(plus_parts[1]);
      d_flow += wg.flow;
      break;
    }
    default: {
      AttendGrads ag = attend_backward(trace.f_im_plus, trace.attention, d_fused);
      if (d_attention_extra) ag.d_attention += *d_attention_extra;
      Tensor d_s = spatial_softmax_backward(trace.attention.maps, ag.d_attention);
      Tensor d_f_w = nets.att.backward(d_s, trace.att_acts);
      WarpGrads wg = bilinear_warp_backward(trace.f_r, trace.flow, d_f_w);
      d_f_r = std::move(wg.features);
      auto plus_parts = split_channels(ag.d_features, {cfg.d_em, 2});
      d_f_im = std::move(plus_parts[0]);
      d_flow = std::move(plus_parts[1]);
      d_flow += wg.flow;
      break;
    }
  }

  nets.embed.backward(d_f_im, trace.embed_im);
  nets.embed.backward(d_f_r, trace.embed_r);
  if (cfg.variant != MarnVariant::V1 && cfg.flow_mode == FlowMode::Learned)
    nets.flow.backward(d_flow, trace.flow_acts);
}

// Chains pose-loss gradients at the refined pose back to the raw head
// outputs, through compose_refinement: R_new = ΔR·R̂ and the center/depth
// shift of Eq-style translation recovery, then the tanh bound on dc.
inline std::pair<Tensor, Tensor> residual_grads_from_pose(
    const Pose& pose_in, const CameraIntrinsics& k, const MarnTrace& trace,
    const MarnConfig& cfg, const Vec3& d_translation, const Mat3& d_rotation) {
  Tensor d_quat_raw({4});
  Tensor d_trans_raw({3});

  Mat3 d_delta_r = d_rotation * pose_in.rotation_matrix().transposed();
  Quaternion biased{trace.quat_raw.at(0) + 1.0, trace.quat_raw.at(1), trace.quat_raw.at(2),
                    trace.quat_raw.at(3)};
  if (biased.norm() >= 1e-12) {
    std::array<double, 4> gq = rotation_grad_to_quat(biased, d_delta_r);
    for (int i = 0; i < 4; ++i) d_quat_raw.at(i) = gq[i];
  }

  Vec2 center = project_point(pose_in.translation, k);
  double dcx = cfg.dc_bound * std::tanh(trace.trans_raw.at(0));
  double dcy = cfg.dc_bound * std::tanh(trace.trans_raw.at(1));
  double tz_new = pose_in.translation.z + trace.trans_raw.at(2);
  double d_dcx = d_translation.x * tz_new / k.fx;
  double d_dcy = d_translation.y * tz_new / k.fy;
  double d_dtz = d_translation.x * (center.x + dcx - k.px) / k.fx +
                 d_translation.y * (center.y + dcy - k.py) / k.fy + d_translation.z;
  double th0 = std::tanh(trace.trans_raw.at(0));
  double th1 = std::tanh(trace.trans_raw.at(1));
  d_trans_raw.at(0) = d_dcx * cfg.dc_bound * (1.0 - th0 * th0);
  d_trans_raw.at(1) = d_dcy * cfg.dc_bound * (1.0 - th1 * th1);
  d_trans_raw.at(2) = d_dtz;
  return {std::move(d_quat_raw), std::move(d_trans_raw)};
}

struct RefineResult {
  Pose pose;
  std::vector<Pose> history;  // input pose first, then one entry per iteration
  bool aborted = false;       // object left the view or depth collapsed mid-loop
  int renders = 0;            // pose re-renders (one crop render per iteration)
};

// Iterative refinement: each pass re-renders the current estimate, runs the
// refiner, and composes the predicted residual. Oracle-flow mode needs the
// ground-truth pose to build the correspondence field.
inline RefineResult refine(const Pose& pose, const Image& image, const ObjectModel& model,
                           const CameraIntrinsics& k, MarnNets& nets, int iterations,
                           const Pose* gt_for_oracle_flow = nullptr) {
  if (iterations < 1) throw config_error("refinement needs at least one iteration");
  const MarnConfig& cfg = nets.cfg;
  bool wants_oracle = cfg.variant != MarnVariant::V1 && cfg.flow_mode == FlowMode::Oracle;
  if (wants_oracle && !gt_for_oracle_flow)
    throw state_error("oracle flow mode needs the ground-truth pose");

  RefineResult out;
  out.pose = pose;
  out.history.push_back(pose);
  CropConfig crop_cfg{cfg.crop, cfg.crop, cfg.bbox_pad};
  for (int it = 0; it < iterations; ++it) {
    CropPair crops;
    try {
      crops = make_input_crops(image, model, out.pose, k, crop_cfg);
    } catch (const out_of_view_error&) {
      out.aborted = true;
      break;
    }
    ++out.renders;
    Tensor oracle;
    MarnTrace trace;
    if (wants_oracle)
      oracle = flow_field_to_tensor(correspondence_flow(
          model, out.pose, *gt_for_oracle_flow, k, crops.crop_origin, cfg.crop, cfg.crop));
    MarnForward fwd = marn_forward(crops, nets, trace, wants_oracle ? &oracle : nullptr);
    Pose next;
    try {
      next = compose_refinement(out.pose, fwd.residual.dq, fwd.residual.dc, fwd.residual.dtz, k);
    } catch (const invalid_depth_error&) {
      out.aborted = true;
      break;
    } catch (const behind_camera_error&) {
      out.aborted = true;
      break;
    }
    out.pose = next;
    out.history.push_back(next);
  }
  return out;
}

template <class F>
inline void marn_for_each_param(MarnNets& nets, F fn) {
  nets.embed.for_each_param(fn);
  if (nets.cfg.variant != MarnVariant::V1 && nets.cfg.flow_mode == FlowMode::Learned)
    nets.flow.for_each_param(fn);
  if (nets.cfg.n_maps() > 0) nets.att.for_each_param(fn);
  nets.head.for_each_param(fn);
  nets.fc_shared.for_each_param(fn);
  nets.fc_rot.for_each_param(fn);
  nets.fc_trans.for_each_param(fn);
}

inline void write_marn_nets(std::ostream& out, const MarnNets& nets) {
  binio::write_i32(out, nets.cfg.crop);
  binio::write_i32(out, nets.cfg.d_em);
  binio::write_i32(out, nets.cfg.attention_maps);
  binio::write_i32(out, int(nets.cfg.variant));
  binio::write_i32(out, int(nets.cfg.flow_mode));
  binio::write_f64(out, nets.cfg.dc_bound);
  binio::write_f64(out, nets.cfg.bbox_pad);
  write_network(out, nets.embed);
  write_network(out, nets.flow);
  write_network(out, nets.att);
  write_network(out, nets.head);
  write_network(out, nets.fc_shared);
  write_network(out, nets.fc_rot);
  write_network(out, nets.fc_trans);
}

inline MarnNets read_marn_nets(std::istream& in) {
  MarnNets nets;
  nets.cfg.crop = binio::read_i32(in);
  nets.cfg.d_em = binio::read_i32(in);
  nets.cfg.attention_maps = binio::read_i32(in);
  int variant = binio::read_i32(in);
  if (variant < 1 || variant > 4) throw data_error("unknown refiner variant in stream");
  nets.cfg.variant = MarnVariant(variant);
  int mode = binio::read_i32(in);
  if (mode < 0 || mode > 1) throw data_error("unknown flow mode in stream");
  nets.cfg.flow_mode = FlowMode(mode);
  nets.cfg.dc_bound = binio::read_f64(in);
  nets.cfg.bbox_pad = binio::read_f64(in);
  nets.embed = read_network(in);
  nets.flow = read_network(in);
  nets.att = read_network(in);
  nets.head = read_network(in);
  nets.fc_shared = read_network(in);
  nets.fc_rot = read_network(in);
  nets.fc_trans = read_network(in);
  return nets;
}

inline void marn_zero_grad(MarnNets& nets) {
  nets.embed.zero_grad();
  nets.flow.zero_grad();
  nets.att.zero_grad();
  nets.head.zero_grad();
  nets.fc_shared.zero_grad();
  nets.fc_rot.zero_grad();
  nets.fc_trans.zero_grad();
}

}  // namespace pose6d
