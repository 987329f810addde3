#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pose6d/config.hpp"
#include "pose6d/errors.hpp"
#include "pose6d/geometry.hpp"
#include "pose6d/image.hpp"
#include "pose6d/losses.hpp"
#include "pose6d/marn.hpp"
#include "pose6d/metrics.hpp"
#include "pose6d/model.hpp"
#include "pose6d/network.hpp"
#include "pose6d/ppn.hpp"
#include "pose6d/random.hpp"
#include "pose6d/renderer.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

enum class BackgroundMode { Flat, Noise };

inline BackgroundMode background_from_name(const std::string& name) {
  if (name == "flat") return BackgroundMode::Flat;
  if (name == "noise") return BackgroundMode::Noise;
  throw config_error("unknown background mode: " + name);
}

/// Camera for synthetic frames: moderate field of view, principal point at
/// the center.
inline CameraIntrinsics intrinsics_for(int width, int height) {
  CameraIntrinsics k;
  k.fx = k.fy = 1.2 * width;
  k.px = 0.5 * width;
  k.py = 0.5 * height;
  k.width = width;
  k.height = height;
  return k;
}

inline CameraIntrinsics intrinsics_for_size(int size) { return intrinsics_for(size, size); }

struct SceneConfig {
  int image_size = 104;
  int grid = 13;
  std::vector<ShapeKind> shapes = {ShapeKind::Cube, ShapeKind::Tetrahedron, ShapeKind::LPrism};
  double shape_scale = 0.1;
  int model_points = 256;
  double depth_min = 0.6, depth_max = 1.1;   // meters
  double center_margin = 0.18;               // fraction of each edge kept clear
  int min_objects = 1, max_objects = 1;
  BackgroundMode background = BackgroundMode::Noise;
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size <= 0 || grid <= 0) throw config_error("image size and grid must be positive");
    if (depth_min <= 0.0 || depth_max < depth_min)
      throw config_error("depth interval must be positive and ordered");
    if (min_objects < 0 || max_objects < min_objects)
      throw config_error("object count range must satisfy 0 <= min <= max");
    if (max_objects > 0 && shapes.empty())
      throw config_error("object set is empty but scenes want objects");
    if (center_margin < 0.0 || center_margin >= 0.5)
      throw config_error("center margin must lie in [0, 0.5)");
  }

  CameraIntrinsics intrinsics() const { return intrinsics_for_size(image_size); }

  std::vector<ObjectModel> build_models() const {
    std::vector<ObjectModel> models;
    for (std::size_t c = 0; c < shapes.size(); ++c)
      models.push_back(make_shape(shapes[c], int(c), model_points, shape_scale));
    return models;
  }
};

inline SceneConfig scene_config_from(const ConfigMap& cfg) {
  SceneConfig sc;
  sc.image_size = cfg.get_int("image_size", sc.image_size);
  sc.grid = cfg.get_int("grid", sc.grid);
  if (cfg.has("shapes")) {
    sc.shapes.clear();
    std::istringstream list(cfg.get_string("shapes", ""));
    std::string name;
    while (std::getline(list, name, ',')) sc.shapes.push_back(shape_kind_from_name(name));
  }
  sc.shape_scale = cfg.get_double("shape_scale", sc.shape_scale);
  sc.model_points = cfg.get_int("model_points", sc.model_points);
  sc.depth_min = cfg.get_double("depth_min", sc.depth_min);
  sc.depth_max = cfg.get_double("depth_max", sc.depth_max);
  sc.center_margin = cfg.get_double("center_margin", sc.center_margin);
  sc.min_objects = cfg.get_int("min_objects", sc.min_objects);
  sc.max_objects = cfg.get_int("max_objects", sc.max_objects);
  sc.background = background_from_name(
      cfg.get_string("background", sc.background == BackgroundMode::Flat ? "flat" : "noise"));
  sc.seed = cfg.get_u64("seed", sc.seed);
  sc.validate();
  return sc;
}

struct SceneObject {
  int class_index = 0;
  Pose pose;
};

struct SceneSample {
  Image image;
  std::vector<SceneObject> objects;
};

namespace detail {

inline Vec3 random_unit_vector(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    double n = v.norm();
    if (n > 1e-9) return v * (1.0 / n);
  }
}

}  // namespace detail

// Every pixel snapped to the 8-bit levels the PPM files use, so in-memory
// datasets match their on-disk round trip exactly.
inline void quantize_colors(Image& img) {
  for (double& v : img.data) v = to_byte(v) / 255.0;
}

// Z-buffer composite of the object set over the configured background. Draw
// order does not matter for visibility; the vector order is kept so the rng
// stream stays reproducible.
inline Image compose_scene_image(const std::vector<ObjectModel>& models,
                                 const std::vector<SceneObject>& objects,
                                 const CameraIntrinsics& k, BackgroundMode background, Rng& rng) {
  Framebuffer fb(k.width, k.height);
  double base_r = rng.uniform(0.1, 0.6);
  double base_g = rng.uniform(0.1, 0.6);
  double base_b = rng.uniform(0.1, 0.6);
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      double jitter = background == BackgroundMode::Noise ? rng.uniform(-0.1, 0.1) : 0.0;
      fb.rgb.at(0, y, x) = std::clamp(base_r + jitter, 0.0, 1.0);
      fb.rgb.at(1, y, x) = std::clamp(base_g + jitter, 0.0, 1.0);
      fb.rgb.at(2, y, x) = std::clamp(base_b + jitter, 0.0, 1.0);
    }
  for (std::size_t o = 0; o < objects.size(); ++o) {
    const ObjectModel& model = models.at(objects[o].class_index);
    raster_object(fb, model.mesh, objects[o].pose, k, class_color(objects[o].class_index),
                  int(o) + 1);
  }
  return std::move(fb.rgb);
}

// Deterministic in (seed, index): every sample draws from its own derived
// stream. Object centers are sampled in the image and lifted to 3D so each
// object starts in view; classes cycle with the index so small datasets
// cover the whole object set.
inline SceneSample generate_scene(const SceneConfig& cfg, const std::vector<ObjectModel>& models,
                                  std::uint64_t index) {
  cfg.validate();
  if (models.size() != cfg.shapes.size())
    throw config_error("model list does not match the configured shape set");
  Rng rng = Rng::for_index(cfg.seed, index);
  CameraIntrinsics k = cfg.intrinsics();

  SceneSample sample;
  int count = cfg.max_objects == cfg.min_objects
                  ? cfg.min_objects
                  : rng.uniform_int(cfg.min_objects, cfg.max_objects);
  for (int o = 0; o < count; ++o) {
    SceneObject obj;
    obj.class_index = o == 0 && !models.empty() ? int(index % models.size())
                                                : rng.uniform_int(0, int(models.size()) - 1);
    double margin = cfg.center_margin * cfg.image_size;
    Vec2 center{rng.uniform(margin, cfg.image_size - margin),
                rng.uniform(margin, cfg.image_size - margin)};
    double depth = rng.uniform(cfg.depth_min, cfg.depth_max);
    obj.pose.translation = recover_translation(center, depth, k);
    obj.pose.rotation = Quaternion::random_uniform(rng);
    sample.objects.push_back(obj);
  }
  sample.image = compose_scene_image(models, sample.objects, k, cfg.background, rng);
  quantize_colors(sample.image);
  return sample;
}

// Random pose disturbance: a rotation of sampled angle about a random axis is
// left-composed, and a translation offset with norm in the configured
// diameter fractions is added. Resampled while the disturbed depth is
// nonpositive.
inline Pose perturb_pose(const Pose& pose, const ObjectModel& model, Rng& rng, double ang_lo_deg,
                         double ang_hi_deg, double trans_lo_frac, double trans_hi_frac) {
  if (ang_lo_deg < 0.0 || ang_hi_deg < ang_lo_deg)
    throw config_error("angular range must satisfy 0 <= lo <= hi");
  if (trans_lo_frac < 0.0 || trans_hi_frac < trans_lo_frac)
    throw config_error("translation range must satisfy 0 <= lo <= hi");
  constexpr int kMaxTries = 32;
  for (int attempt = 0; attempt < kMaxTries; ++attempt) {
    double angle = rng.uniform(ang_lo_deg, ang_hi_deg) * 3.14159265358979323846 / 180.0;
    Quaternion dq = Quaternion::from_axis_angle(detail::random_unit_vector(rng), angle);
    double mag = rng.uniform(trans_lo_frac, trans_hi_frac) * model.diameter;
    Vec3 offset = detail::random_unit_vector(rng) * mag;
    Pose out;
    out.rotation = (dq * pose.rotation).normalized();
    out.translation = pose.translation + offset;
    if (out.translation.z > 0.0) return out;
  }
  throw invalid_depth_error("perturbation kept pushing the object behind the camera");
}

// ---------------------------------------------------------------------------
// Manifest and dataset plumbing (JSON lines + PPM + OBJ on disk)
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string image;  // path relative to the manifest
  std::vector<SceneObject> objects;
  CameraIntrinsics k;
};

namespace detail {

inline nlohmann::json pose_to_json(const Pose& pose) {
  return nlohmann::json{
      {"quat", {pose.rotation.w, pose.rotation.x, pose.rotation.y, pose.rotation.z}},
      {"t", {pose.translation.x, pose.translation.y, pose.translation.z}}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  const auto& q = j.at("quat");
  const auto& t = j.at("t");
  if (q.size() != 4 || t.size() != 3) throw data_error("pose needs quat[4] and t[3]");
  Pose pose;
  pose.rotation = Quaternion{q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                             q[3].get<double>()};
  try {
    pose.rotation = pose.rotation.normalized();
  } catch (const invalid_rotation_error&) {
    throw data_error("pose quaternion is degenerate");
  }
  pose.translation = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
  return pose;
}

}  // namespace detail

inline Pose load_pose_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open pose file: " + path);
  try {
    return detail::pose_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path + ": " + e.what());
  }
}

inline void save_pose_json(const std::string& path, const Pose& pose) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << detail::pose_to_json(pose).dump() << "\n";
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  for (const auto& rec : records) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& obj : rec.objects) {
      nlohmann::json entry = detail::pose_to_json(obj.pose);
      entry["class"] = obj.class_index;
      objs.push_back(std::move(entry));
    }
    nlohmann::json line{{"image", rec.image},
                        {"intrinsics",
                         {{"fx", rec.k.fx},
                          {"fy", rec.k.fy},
                          {"px", rec.k.px},
                          {"py", rec.k.py},
                          {"width", rec.k.width},
                          {"height", rec.k.height}}},
                        {"objects", std::move(objs)}};
    out << line.dump() << "\n";
  }
  if (!out) throw data_error("write failed: " + path);
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open manifest: " + path);
  std::filesystem::path dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      ManifestRecord rec;
      rec.image = j.at("image").get<std::string>();
      const auto& ji = j.at("intrinsics");
      rec.k.fx = ji.at("fx").get<double>();
      rec.k.fy = ji.at("fy").get<double>();
      rec.k.px = ji.at("px").get<double>();
      rec.k.py = ji.at("py").get<double>();
      rec.k.width = ji.at("width").get<int>();
      rec.k.height = ji.at("height").get<int>();
      for (const auto& jo : j.at("objects")) {
        SceneObject obj;
        obj.class_index = jo.at("class").get<int>();
        obj.pose = detail::pose_from_json(jo);
        rec.objects.push_back(obj);
      }
      if (!std::filesystem::exists(dir / rec.image))
        throw data_error("referenced image missing: " + rec.image);
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw data_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

/// Fully loaded training/evaluation corpus.
struct Dataset {
  std::vector<ObjectModel> models;
  std::vector<SceneSample> scenes;
  CameraIntrinsics k;
  int grid = 13;
};

inline Dataset generate_dataset(const SceneConfig& cfg, int count) {
  if (count < 0) throw config_error("scene count must be nonnegative");
  Dataset data;
  data.models = cfg.build_models();
  data.k = cfg.intrinsics();
  data.grid = cfg.grid;
  for (int i = 0; i < count; ++i) data.scenes.push_back(generate_scene(cfg, data.models, i));
  return data;
}

inline std::string scene_image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06d.ppm", index);
  return buf;
}

inline void write_dataset(const std::string& dir, const SceneConfig& cfg, int count) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  std::filesystem::path root(dir);
  Dataset data = generate_dataset(cfg, count);
  for (std::size_t c = 0; c < data.models.size(); ++c)
    save_obj((root / ("model_" + std::to_string(c) + ".obj")).string(), data.models[c]);
  std::vector<ManifestRecord> records;
  for (int i = 0; i < count; ++i) {
    save_ppm((root / scene_image_name(i)).string(), data.scenes[i].image);
    records.push_back({scene_image_name(i), data.scenes[i].objects, data.k});
  }
  write_manifest((root / "manifest.jsonl").string(), records);
  std::ofstream meta(root / "dataset.txt");
  meta << "classes = " << data.models.size() << "\n";
  meta << "model_points = " << cfg.model_points << "\n";
  meta << "image_size = " << cfg.image_size << "\n";
  meta << "grid = " << cfg.grid << "\n";
  if (!meta) throw data_error("cannot write dataset metadata in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  std::filesystem::path root(dir);
  ConfigMap meta = ConfigMap::load((root / "dataset.txt").string());
  int classes = meta.get_int("classes", -1);
  int model_points = meta.get_int("model_points", 256);
  if (classes <= 0) throw data_error("dataset metadata lacks a class count");

  Dataset data;
  data.grid = meta.get_int("grid", 13);
  for (int c = 0; c < classes; ++c)
    data.models.push_back(
        load_obj((root / ("model_" + std::to_string(c) + ".obj")).string(), c, model_points));

  std::vector<ManifestRecord> records = read_manifest((root / "manifest.jsonl").string());
  if (records.empty()) throw data_error("dataset has no scenes: " + dir);
  data.k = records.front().k;
  for (const auto& rec : records) {
    if (rec.k.fx != data.k.fx || rec.k.fy != data.k.fy || rec.k.px != data.k.px ||
        rec.k.py != data.k.py || rec.k.width != data.k.width || rec.k.height != data.k.height)
      throw data_error("mixed intrinsics within one dataset");
    SceneSample scene;
    scene.image = load_ppm((root / rec.image).string());
    if (scene.image.width != data.k.width || scene.image.height != data.k.height)
      throw data_error("image size disagrees with intrinsics: " + rec.image);
    for (const auto& obj : rec.objects) {
      if (obj.class_index < 0 || obj.class_index >= classes)
        throw data_error("object class outside the model set: " + rec.image);
      scene.objects.push_back(obj);
    }
    data.scenes.push_back(std::move(scene));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 80;
  int batch_size = 4;
  double lr = 1e-3;
  LossWeights weights;
  int lambda_switch_epoch = -1;  // -1: switch at epochs / 2
  int flow_freeze_epochs = 2;
  int attention_maps = 4;
  int refine_iterations = 1;  // unrolled refinement passes per training pair
  int pairs_per_object = 1;   // perturbed refiner pairs per ground-truth object
  double ang_lo = 10.0, ang_hi = 20.0;      // perturbation angles, degrees
  double trans_lo = 0.05, trans_hi = 0.15;  // perturbation offsets, diameter fractions
  int d = 128;
  int d_em = 8;
  int crop = 64;
  double dc_bound = 16.0;
  MarnVariant variant = MarnVariant::V4;
  FlowMode flow_mode = FlowMode::Oracle;
  bool train_ppn = true;
  bool train_marn = true;
  double conf_threshold = 0.5;
  double nms_iou = 0.3;
  std::uint64_t seed = 7;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || attention_maps < 1 || refine_iterations < 1)
      throw config_error("epochs, batch size, attention maps, and iterations must be >= 1");
    if (pairs_per_object < 0) throw config_error("pairs per object must be nonnegative");
    if (lr <= 0.0) throw config_error("learning rate must be positive");
    if (!train_ppn && !train_marn) throw config_error("nothing selected to train");
  }

  int switch_epoch(int total) const {
    return lambda_switch_epoch >= 0 ? lambda_switch_epoch : total / 2;
  }
};

inline MarnVariant variant_from_name(const std::string& name) {
  if (name == "v1") return MarnVariant::V1;
  if (name == "v2") return MarnVariant::V2;
  if (name == "v3") return MarnVariant::V3;
  if (name == "v4") return MarnVariant::V4;
  throw config_error("unknown refiner variant: " + name);
}

inline TrainConfig train_config_from(const ConfigMap& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.get_int("epochs", tc.epochs);
  tc.batch_size = cfg.get_int("batch_size", tc.batch_size);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.weights.alpha = cfg.get_double("alpha", tc.weights.alpha);
  tc.weights.beta = cfg.get_double("beta", tc.weights.beta);
  tc.weights.gamma = cfg.get_double("gamma", tc.weights.gamma);
  tc.weights.kappa = cfg.get_double("kappa", tc.weights.kappa);
  tc.lambda_switch_epoch = cfg.get_int("lambda_switch_epoch", tc.lambda_switch_epoch);
  tc.flow_freeze_epochs = cfg.get_int("flow_freeze_epochs", tc.flow_freeze_epochs);
  tc.attention_maps = cfg.get_int("attention_maps", tc.attention_maps);
  tc.refine_iterations = cfg.get_int("refine_iterations", tc.refine_iterations);
  tc.pairs_per_object = cfg.get_int("pairs_per_object", tc.pairs_per_object);
  tc.ang_lo = cfg.get_double("ang_lo", tc.ang_lo);
  tc.ang_hi = cfg.get_double("ang_hi", tc.ang_hi);
  tc.trans_lo = cfg.get_double("trans_lo", tc.trans_lo);
  tc.trans_hi = cfg.get_double("trans_hi", tc.trans_hi);
  tc.d = cfg.get_int("d", tc.d);
  tc.d_em = cfg.get_int("d_em", tc.d_em);
  tc.crop = cfg.get_int("crop", tc.crop);
  tc.dc_bound = cfg.get_double("dc_bound", tc.dc_bound);
  tc.variant = variant_from_name(cfg.get_string("variant", "v4"));
  std::string mode = cfg.get_string("flow_mode", "oracle");
  if (mode == "oracle")
    tc.flow_mode = FlowMode::Oracle;
  else if (mode == "learned")
    tc.flow_mode = FlowMode::Learned;
  else
    throw config_error("unknown flow mode: " + mode);
  tc.train_ppn = cfg.get_bool("train_ppn", tc.train_ppn);
  tc.train_marn = cfg.get_bool("train_marn", tc.train_marn);
  tc.conf_threshold = cfg.get_double("conf_threshold", tc.conf_threshold);
  tc.nms_iou = cfg.get_double("nms_iou", tc.nms_iou);
  tc.seed = cfg.get_u64("seed", tc.seed);
  tc.validate();
  return tc;
}

/// Adam with bias correction. Moment slots are claimed on the first step in
/// visit order; later steps must enumerate the identical parameter set.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <class Visit>
  void step(Visit visit) {
    ++steps_;
    double c1 = 1.0 - std::pow(beta1_, double(steps_));
    double c2 = 1.0 - std::pow(beta2_, double(steps_));
    std::size_t slot = 0;
    bool first = steps_ == 1;
    visit([&](Tensor& w, Tensor& g) {
      if (first) {
        m_.emplace_back(w.numel(), 0.0);
        v_.emplace_back(w.numel(), 0.0);
      }
      if (slot >= m_.size() || m_[slot].size() != w.numel())
        throw state_error("optimizer slots drifted from the parameter set");
      std::vector<double>& m = m_[slot];
      std::vector<double>& v = v_[slot];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g.data[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
        w.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      ++slot;
    });
    if (slot != m_.size()) throw state_error("optimizer step visited fewer parameters");
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LossRow {
  int epoch = 0;
  int step = 0;
  double pose = 0.0, conf = 0.0, ref = 0.0, orth = 0.0, total = 0.0;
  double lambda_obj = 0.0;
};

struct TrainResult {
  PpnNets ppn;
  MarnNets marn;
  std::vector<LossRow> log;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& log) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.precision(17);
  out << "epoch,L_pose,L_conf,L_ref,L_orth,total\n";
  for (const auto& row : log)
    out << row.epoch << "," << row.pose << "," << row.conf << "," << row.ref << "," << row.orth
        << "," << row.total << "\n";
  if (!out) throw data_error("write failed: " + path);
}

inline void save_checkpoint(const std::string& path, const PpnNets& ppn, const MarnNets& marn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  binio::write_tag(out, "P6CK");
  write_ppn_nets(out, ppn);
  write_marn_nets(out, marn);
  if (!out) throw data_error("write failed: " + path);
}

inline std::pair<PpnNets, MarnNets> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path);
  binio::expect_tag(in, "P6CK", "checkpoint " + path);
  PpnNets ppn = read_ppn_nets(in);
  MarnNets marn = read_marn_nets(in);
  return {std::move(ppn), std::move(marn)};
}

namespace detail {

// Chains pose-loss gradients on a grid proposal back to the raw decoder
// outputs at one cell: through translation recovery, the sigmoid cell offset,
// the softplus depth, and the identity-biased quaternion normalization.
inline void ppn_cell_grads(const GridProposals& grids, const CellIndex& cell, int class_index,
                           const CameraIntrinsics& k, const PoseLossGrads& pl, double scale,
                           Tensor& d_quat_raw, Tensor& d_center_raw, Tensor& d_tz_raw) {
  int c = class_index, i = cell.i, j = cell.j;
  Quaternion biased{grids.quat_raw.at(4 * c + 0, j, i) + 1.0, grids.quat_raw.at(4 * c + 1, j, i),
                    grids.quat_raw.at(4 * c + 2, j, i), grids.quat_raw.at(4 * c + 3, j, i)};
  if (biased.norm() >= 1e-12) {
    std::array<double, 4> gq = rotation_grad_to_quat(biased, pl.d_rotation);
    for (int q = 0; q < 4; ++q) d_quat_raw.at(4 * c + q, j, i) += scale * gq[q];
  }

  double cell_px = double(grids.image_size) / grids.grid;
  Vec2 raw{grids.center_raw.at(2 * c + 0, j, i), grids.center_raw.at(2 * c + 1, j, i)};
  Vec2 center = decode_cell_center(raw, cell, double(grids.image_size));
  double tz = grids.tz.at(c, j, i);
  double d_cx = pl.d_translation.x * tz / k.fx;
  double d_cy = pl.d_translation.y * tz / k.fy;
  double d_tz = pl.d_translation.x * (center.x - k.px) / k.fx +
                pl.d_translation.y * (center.y - k.py) / k.fy + pl.d_translation.z;
  double sx = sigmoid(raw.x), sy = sigmoid(raw.y);
  d_center_raw.at(2 * c + 0, j, i) += scale * d_cx * cell_px * sx * (1.0 - sx);
  d_center_raw.at(2 * c + 1, j, i) += scale * d_cy * cell_px * sy * (1.0 - sy);
  d_tz_raw.at(c, j, i) += scale * d_tz * sigmoid(grids.tz_raw.at(c, j, i));
}

}  // namespace detail

// Joint optimization of the proposal and refinement networks: the weighted
// sum of pose, confidence, refinement, and orthogonality terms drives one
// Adam step per batch. Refiner pairs perturb the ground truth and unroll the
// configured number of refinement passes, re-rendering at each pass.
inline TrainResult train(const TrainConfig& tc, const Dataset& data,
                         std::vector<LossRow>* log_out = nullptr,
                         std::ostream* progress = nullptr) {
  tc.validate();
  if (data.scenes.empty()) throw config_error("training needs at least one scene");
  int classes = int(data.models.size());
  if (classes < 1) throw config_error("training needs at least one object class");
  const CameraIntrinsics& k = data.k;
  if (k.width != k.height) throw data_error("training expects square frames");

  Rng rng(tc.seed);
  PpnConfig pcfg{k.width, data.grid, classes, tc.d};
  MarnConfig mcfg;
  mcfg.crop = tc.crop;
  mcfg.d_em = tc.d_em;
  mcfg.attention_maps = tc.attention_maps;
  mcfg.variant = tc.variant;
  mcfg.flow_mode = tc.flow_mode;
  mcfg.dc_bound = tc.dc_bound;

  TrainResult result{build_ppn_nets(pcfg, rng), build_marn_nets(mcfg, rng), {}};
  PpnNets& ppn = result.ppn;
  MarnNets& marn = result.marn;
  Adam adam(tc.lr);
  bool oracle = tc.flow_mode == FlowMode::Oracle;
  double switch_frac = double(tc.switch_epoch(tc.epochs)) / double(tc.epochs);

  int n = int(data.scenes.size());
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    LossWeights w = tc.weights;
    apply_conf_schedule(w, epoch, tc.epochs, switch_frac);
    double ep_pose = 0, ep_conf = 0, ep_ref = 0, ep_orth = 0, ep_total = 0;
    int steps = 0;

    for (int start = 0; start < n; start += tc.batch_size) {
      int batch = std::min(tc.batch_size, n - start);
      ppn_zero_grad(ppn);
      marn_zero_grad(marn);
      LossParts parts;
      // Fixed divisors keep the loss and its gradients consistent even when
      // an occasional pair aborts (out of view, depth collapse) and
      // contributes zero.
      int planned_pairs = 0;
      for (int b = 0; b < batch; ++b)
        planned_pairs += int(data.scenes[start + b].objects.size()) * tc.pairs_per_object *
                         tc.refine_iterations;

      for (int b = 0; b < batch; ++b) {
        const SceneSample& scene = data.scenes[start + b];
        Tensor input = image_to_tensor(scene.image);

        if (tc.train_ppn) {
          PpnTrace trace;
          GridProposals grids = ppn_forward(input, ppn, &trace);
          std::vector<ClassPose> gts;
          for (const auto& obj : scene.objects) gts.push_back({obj.class_index, obj.pose});
          Tensor conf_target = confidence_target(gts, k, data.grid, classes);
          ConfLossGrads cl = loss_conf(conf_target, grids.conf, w);
          parts.conf += cl.value / batch;
          Tensor d_conf = cl.grad;
          d_conf *= w.beta / batch;

          Tensor d_quat_raw(grids.quat_raw.shape);
          Tensor d_center_raw(grids.center_raw.shape);
          Tensor d_tz_raw(grids.tz_raw.shape);
          int nobj = int(scene.objects.size());
          for (const auto& obj : scene.objects) {
            Vec2 uv;
            try {
              uv = project_point(obj.pose.translation, k);
            } catch (const behind_camera_error&) {
              continue;
            }
            int ci = std::clamp(int(std::floor(uv.x * data.grid / k.width)), 0, data.grid - 1);
            int cj = std::clamp(int(std::floor(uv.y * data.grid / k.height)), 0, data.grid - 1);
            CellIndex cell{ci, cj, data.grid};
            const ObjectModel& model = data.models[obj.class_index];
            int c = obj.class_index;
            Pose pred;
            pred.rotation = Quaternion{grids.quat.at(4 * c + 0, cj, ci),
                                       grids.quat.at(4 * c + 1, cj, ci),
                                       grids.quat.at(4 * c + 2, cj, ci),
                                       grids.quat.at(4 * c + 3, cj, ci)};
            Vec2 raw{grids.center_raw.at(2 * c + 0, cj, ci),
                     grids.center_raw.at(2 * c + 1, cj, ci)};
            Vec2 center = decode_cell_center(raw, cell, double(grids.image_size));
            pred.translation = recover_translation(center, grids.tz.at(c, cj, ci), k);
            PoseLossGrads pl = loss_pose(obj.pose, pred, model, model.is_symmetric);
            parts.pose += pl.value / (nobj * batch);
            detail::ppn_cell_grads(grids, cell, c, k, pl, w.alpha / (nobj * batch), d_quat_raw,
                                   d_center_raw, d_tz_raw);
          }
          ppn_backward(ppn, trace, d_conf, d_quat_raw, d_center_raw, d_tz_raw);
        }

        if (tc.train_marn && planned_pairs > 0) {
          for (const auto& obj : scene.objects) {
            const ObjectModel& model = data.models[obj.class_index];
            for (int p = 0; p < tc.pairs_per_object; ++p) {
              Pose cur = perturb_pose(obj.pose, model, rng, tc.ang_lo, tc.ang_hi, tc.trans_lo,
                                      tc.trans_hi);
              for (int it = 0; it < tc.refine_iterations; ++it) {
                CropPair crops;
                try {
                  crops = make_input_crops(scene.image, model, cur, k,
                                           {mcfg.crop, mcfg.crop, mcfg.bbox_pad});
                } catch (const out_of_view_error&) {
                  break;
                }
                Tensor flow;
                if (oracle)
                  flow = flow_field_to_tensor(correspondence_flow(
                      model, cur, obj.pose, k, crops.crop_origin, mcfg.crop, mcfg.crop));
                MarnTrace trace;
                MarnForward fwd = marn_forward(crops, marn, trace, oracle ? &flow : nullptr);
                Pose refined;
                try {
                  refined = compose_refinement(cur, fwd.residual.dq, fwd.residual.dc,
                                               fwd.residual.dtz, k);
                } catch (const invalid_depth_error&) {
                  break;
                }
                PoseLossGrads pl = loss_pose(obj.pose, refined, model, model.is_symmetric);
                parts.ref += pl.value / planned_pairs;
                auto [d_quat_raw, d_trans_raw] = residual_grads_from_pose(
                    cur, k, trace, mcfg, pl.d_translation, pl.d_rotation);
                d_quat_raw *= w.gamma / planned_pairs;
                d_trans_raw *= w.gamma / planned_pairs;
                if (mcfg.n_maps() > 0) {
                  OrthLossGrads ol = loss_orth(trace.attention.maps);
                  parts.orth += ol.value / planned_pairs;
                  Tensor d_att = ol.grad;
                  d_att *= w.kappa / planned_pairs;
                  marn_backward(marn, trace, d_quat_raw, d_trans_raw, &d_att);
                } else {
                  marn_backward(marn, trace, d_quat_raw, d_trans_raw);
                }
                cur = refined;
              }
            }
          }
        }
      }

      if (tc.train_marn && tc.flow_mode == FlowMode::Learned && epoch < tc.flow_freeze_epochs)
        marn.flow.zero_grad();  // frozen warm-up: moments stay zero, weights stay put

      TotalLoss total;
      try {
        total = loss_total(parts, w);
      } catch (const divergence_error& e) {
        throw divergence_error("epoch " + std::to_string(epoch) + " step " +
                               std::to_string(steps) + ": " + e.what());
      }
      adam.step([&](auto fn) {
        if (tc.train_ppn) ppn_for_each_param(ppn, fn);
        if (tc.train_marn) marn_for_each_param(marn, fn);
      });

      LossRow row{epoch, steps, parts.pose, parts.conf, parts.ref, parts.orth, total.value,
                  w.lambda_obj};
      result.log.push_back(row);
      if (log_out) log_out->push_back(row);
      ep_pose += parts.pose;
      ep_conf += parts.conf;
      ep_ref += parts.ref;
      ep_orth += parts.orth;
      ep_total += total.value;
      ++steps;
    }

    if (progress)
      *progress << "epoch " << epoch << " total " << ep_total / steps << " pose "
                << ep_pose / steps << " conf " << ep_conf / steps << " ref " << ep_ref / steps
                << " orth " << ep_orth / steps << " lambda_obj " << w.lambda_obj << "\n";
  }
  return result;
}

inline TrainResult train(const TrainConfig& tc, const SceneConfig& scene_cfg, int scene_count,
                         std::vector<LossRow>* log_out = nullptr,
                         std::ostream* progress = nullptr) {
  return train(tc, generate_dataset(scene_cfg, scene_count), log_out, progress);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
  int iterations = 1;  // 0 evaluates the raw proposals
  double conf_threshold = 0.5;
  double nms_iou = 0.3;
  MetricThresholds thresholds;
};

inline std::vector<Detection> detect_scene(const Dataset& data, int scene, PpnNets& ppn,
                                           const EvalConfig& ec) {
  Tensor input = image_to_tensor(data.scenes[scene].image);
  GridProposals grids = ppn_forward(input, ppn);
  std::vector<Detection> dets = decode_proposals(grids, data.k, data.models, ec.conf_threshold);
  return nms_duplicates(dets, ec.nms_iou);
}

// Scores one scene's detections against its ground truth: every ground-truth
// object claims the nearest unclaimed detection of its class (by projected
// center), optionally refined; unmatched objects score infinite errors so
// misses count against every accuracy threshold. Matched detections get
// their refined pose written back.
inline void score_scene(const Dataset& data, int scene, std::vector<Detection>& dets,
                        MarnNets* marn, const EvalConfig& ec, std::vector<SampleEval>& samples,
                        int& missed) {
  const SceneSample& sc = data.scenes[scene];
  std::vector<bool> used(dets.size(), false);
  for (const auto& obj : sc.objects) {
    const ObjectModel& model = data.models[obj.class_index];
    Vec2 gt_center;
    try {
      gt_center = project_point(obj.pose.translation, data.k);
    } catch (const behind_camera_error&) {
      ++missed;
      samples.push_back({model.id, std::numeric_limits<double>::infinity(),
                         std::numeric_limits<double>::infinity()});
      continue;
    }
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (used[d] || dets[d].class_index != obj.class_index) continue;
      Vec2 det_center;
      try {
        det_center = project_point(dets[d].pose.translation, data.k);
      } catch (const behind_camera_error&) {
        continue;
      }
      double dist = (det_center - gt_center).norm();
      if (dist < best_dist) {
        best_dist = dist;
        best = int(d);
      }
    }
    if (best < 0) {
      ++missed;
      samples.push_back({model.id, std::numeric_limits<double>::infinity(),
                         std::numeric_limits<double>::infinity()});
      continue;
    }
    used[best] = true;
    Pose est = dets[best].pose;
    if (ec.iterations > 0 && marn) {
      bool oracle =
          marn->cfg.variant != MarnVariant::V1 && marn->cfg.flow_mode == FlowMode::Oracle;
      RefineResult rr = refine(est, sc.image, model, data.k, *marn, ec.iterations,
                               oracle ? &obj.pose : nullptr);
      est = rr.pose;
      dets[best].pose = est;
    }
    samples.push_back({model.id, metric_add(obj.pose, est, model, model.is_symmetric),
                       metric_proj2d(obj.pose, est, model, data.k, model.is_symmetric)});
  }
}

struct EvalResult {
  MetricReport report;
  std::vector<SampleEval> samples;
  std::vector<std::vector<Detection>> detections;  // per scene, after suppression
  int missed = 0;
};

inline EvalResult evaluate(const Dataset& data, PpnNets& ppn, MarnNets& marn,
                           const EvalConfig& ec) {
  if (ppn.cfg.classes != int(data.models.size()))
    throw data_error("checkpoint class count does not match the dataset");
  if (ppn.cfg.image_size != data.k.width || ppn.cfg.image_size != data.k.height)
    throw data_error("checkpoint image size does not match the dataset");
  EvalResult out;
  for (int s = 0; s < int(data.scenes.size()); ++s) {
    std::vector<Detection> dets = detect_scene(data, s, ppn, ec);
    score_scene(data, s, dets, &marn, ec, out.samples, out.missed);
    out.detections.push_back(std::move(dets));
  }
  std::map<int, double> diameters;
  for (const auto& model : data.models) diameters[model.id] = model.diameter;
  out.report = make_report(out.samples, diameters, ec.thresholds);
  return out;
}

inline nlohmann::json summary_to_json(const MetricSummary& s) {
  return nlohmann::json{{"count", s.count},
                        {"add_mean", s.add_mean},
                        {"proj_mean", s.proj_mean},
                        {"acc_add_diameter", s.acc_add_diameter},
                        {"acc_add_abs", s.acc_add_abs},
                        {"acc_proj", s.acc_proj},
                        {"auc", s.auc}};
}

inline nlohmann::json report_to_json(const MetricReport& report) {
  nlohmann::json objs;
  for (const auto& [id, summary] : report.per_object)
    objs[std::to_string(id)] = summary_to_json(summary);
  return nlohmann::json{{"objects", std::move(objs)}, {"mean", summary_to_json(report.mean)}};
}

inline void write_detections_jsonl(const std::string& path,
                                   const std::vector<std::vector<Detection>>& per_scene) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  for (const auto& dets : per_scene)
    for (const auto& d : dets) {
      nlohmann::json line{{"class", d.class_index},
                          {"quat",
                           {d.pose.rotation.w, d.pose.rotation.x, d.pose.rotation.y,
                            d.pose.rotation.z}},
                          {"t", {d.pose.translation.x, d.pose.translation.y, d.pose.translation.z}},
                          {"conf", d.confidence},
                          {"cell", {d.cell.i, d.cell.j}}};
      out << line.dump() << "\n";
    }
  if (!out) throw data_error("write failed: " + path);
}

// One JSON line per refinement step; ADD against the ground truth rides along
// when it is known.
inline void write_refine_trace(std::ostream& out, const std::vector<Pose>& history,
                               const ObjectModel& model, const Pose* gt) {
  for (std::size_t i = 0; i < history.size(); ++i) {
    nlohmann::json line = detail::pose_to_json(history[i]);
    line["iter"] = int(i);
    if (gt) line["add_to_gt"] = metric_add(*gt, history[i], model, model.is_symmetric);
    out << line.dump() << "\n";
  }
}

}  // namespace pose6d
