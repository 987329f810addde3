#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>

#include "CLI11.hpp"
#include "pose6d/harness.hpp"

namespace {

int run_gen(const std::string& config, const std::string& out_dir, int count) {
  pose6d::SceneConfig cfg = pose6d::scene_config_from(pose6d::ConfigMap::load(config));
  pose6d::write_dataset(out_dir, cfg, count);
  std::cout << "wrote " << count << " scenes to " << out_dir << "\n";
  return 0;
}

int run_train(const std::string& config, const std::string& data_dir, const std::string& out) {
  pose6d::TrainConfig tc = pose6d::train_config_from(pose6d::ConfigMap::load(config));
  pose6d::Dataset data = pose6d::load_dataset(data_dir);
  std::vector<pose6d::LossRow> rows;
  try {
    pose6d::TrainResult result = pose6d::train(tc, data, &rows, &std::cout);
    pose6d::save_checkpoint(out, result.ppn, result.marn);
    pose6d::write_loss_csv(out + ".loss.csv", result.log);
    std::cout << "checkpoint " << out << " (" << result.log.size() << " log rows)\n";
  } catch (const pose6d::divergence_error&) {
    pose6d::write_loss_csv(out + ".loss.csv", rows);  // keep the partial log for diagnosis
    throw;
  }
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir, int iters,
             const std::string& ablation, std::string report_path, std::string det_path) {
  auto [ppn, marn] = pose6d::load_checkpoint(ckpt);
  if (ablation != "none") {
    pose6d::MarnVariant want = pose6d::variant_from_name(ablation);
    if (marn.cfg.variant != want)
      throw pose6d::data_error("checkpoint was trained as v" +
                               std::to_string(int(marn.cfg.variant)) + ", not " + ablation);
  }
  pose6d::Dataset data = pose6d::load_dataset(data_dir);
  pose6d::EvalConfig ec;
  ec.iterations = iters;
  pose6d::EvalResult result = pose6d::evaluate(data, ppn, marn, ec);
  std::cout << pose6d::format_report(result.report);
  if (result.missed > 0) std::cout << "missed objects: " << result.missed << "\n";

  if (report_path.empty()) report_path = (std::filesystem::path(data_dir) / "report.json").string();
  if (det_path.empty()) det_path = (std::filesystem::path(data_dir) / "detections.jsonl").string();
  std::ofstream rj(report_path);
  if (!rj) throw pose6d::data_error("cannot open for writing: " + report_path);
  rj << pose6d::report_to_json(result.report).dump(2) << "\n";
  pose6d::write_detections_jsonl(det_path, result.detections);
  return 0;
}

int run_refine(const std::string& ckpt, const std::string& image_path,
               const std::string& model_path, const std::string& pose_path, int iters,
               const std::string& gt_path, const std::string& out_path, int points) {
  auto [ppn, marn] = pose6d::load_checkpoint(ckpt);
  pose6d::Image image = pose6d::load_ppm(image_path);
  pose6d::ObjectModel model = pose6d::load_obj(model_path, 0, points);
  pose6d::Pose pose = pose6d::load_pose_json(pose_path);
  pose6d::Pose gt;
  bool has_gt = !gt_path.empty();
  if (has_gt) gt = pose6d::load_pose_json(gt_path);
  bool oracle = marn.cfg.variant != pose6d::MarnVariant::V1 &&
                marn.cfg.flow_mode == pose6d::FlowMode::Oracle;
  if (oracle && !has_gt)
    throw pose6d::config_error("this checkpoint uses oracle flow; pass --gt <pose.json>");

  pose6d::CameraIntrinsics k = pose6d::intrinsics_for(image.width, image.height);
  pose6d::RefineResult rr =
      pose6d::refine(pose, image, model, k, marn, iters, has_gt ? &gt : nullptr);
  pose6d::write_refine_trace(std::cout, rr.history, model, has_gt ? &gt : nullptr);
  if (rr.aborted) std::cerr << "refinement stopped early: estimate left the view\n";
  if (!out_path.empty()) pose6d::save_pose_json(out_path, rr.pose);
  return 0;
}

int run_render(const std::string& model_path, const std::string& pose_path,
               const std::string& out_path, int size, int points) {
  pose6d::ObjectModel model = pose6d::load_obj(model_path, 0, points);
  pose6d::Pose pose = pose6d::load_pose_json(pose_path);
  pose6d::RenderOutput render =
      pose6d::rasterize(model, pose, pose6d::intrinsics_for_size(size));
  pose6d::save_ppm(out_path, render.rgb);
  std::cout << "rendered " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"6D object pose estimation on synthetic scenes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string gen_config, gen_out;
  int gen_count = 0;
  gen->add_option("--config", gen_config, "Scene config file (key=value)")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->required();

  auto* train = app.add_subcommand("train", "Train on a generated dataset");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "Training config file (key=value)")->required();
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Checkpoint output path")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_ablation = "none", eval_report, eval_dets;
  int eval_iters = 0;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--iters", eval_iters, "Refinement iterations (0: proposals only)")
      ->required();
  eval_cmd->add_option("--ablation", eval_ablation, "Expected refiner variant")
      ->check(CLI::IsMember({"none", "v1", "v2", "v3", "v4"}));
  eval_cmd->add_option("--report", eval_report, "Metric report JSON path");
  eval_cmd->add_option("--detections", eval_dets, "Detections JSONL path");

  auto* refine = app.add_subcommand("refine", "Refine a pose estimate on one image");
  std::string ref_ckpt, ref_image, ref_model, ref_pose, ref_gt, ref_out;
  int ref_iters = 1, ref_points = 256;
  refine->add_option("--ckpt", ref_ckpt, "Checkpoint path")->required();
  refine->add_option("--image", ref_image, "Input image (PPM)")->required();
  refine->add_option("--model", ref_model, "Object mesh (OBJ)")->required();
  refine->add_option("--pose", ref_pose, "Initial pose JSON")->required();
  refine->add_option("--iters", ref_iters, "Refinement iterations")->required();
  refine->add_option("--gt", ref_gt, "Ground-truth pose JSON (oracle flow, trace ADD)");
  refine->add_option("--out", ref_out, "Refined pose JSON output");
  refine->add_option("--points", ref_points, "Surface points to sample on the model");

  auto* render = app.add_subcommand("render", "Render a model at a pose");
  std::string ren_model, ren_pose, ren_out;
  int ren_size = 256, ren_points = 256;
  render->add_option("--model", ren_model, "Object mesh (OBJ)")->required();
  render->add_option("--pose", ren_pose, "Pose JSON")->required();
  render->add_option("--out", ren_out, "Output image (PPM)")->required();
  render->add_option("--size", ren_size, "Square image edge in pixels");
  render->add_option("--points", ren_points, "Surface points to sample on the model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return run_gen(gen_config, gen_out, gen_count);
    if (*train) return run_train(train_config, train_data, train_out);
    if (*eval_cmd)
      return run_eval(eval_ckpt, eval_data, eval_iters, eval_ablation, eval_report, eval_dets);
    if (*refine)
      return run_refine(ref_ckpt, ref_image, ref_model, ref_pose, ref_iters, ref_gt, ref_out,
                        ref_points);
    if (*render) return run_render(ren_model, ren_pose, ren_out, ren_size, ren_points);
  } catch (const pose6d::divergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const pose6d::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const pose6d::data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
