#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "cpae/data.hpp"
#include "cpae/errors.hpp"
#include "cpae/gradcheck.hpp"
#include "cpae/infer.hpp"
#include "cpae/log.hpp"
#include "cpae/metrics.hpp"
#include "cpae/model.hpp"
#include "cpae/train.hpp"

#ifndef CPAE_VERSION
#define CPAE_VERSION "0.1.0"
#endif

namespace cpae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

inline std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_json_atomic(const fs::path& path, const json& j) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Run manifest: written atomically before the command does real work, then
// rewritten with the end timestamp. Every artifact the command produces is
// listed under "outputs".
class Manifest {
 public:
  Manifest(const fs::path& out_dir, const std::string& command, std::uint64_t seed,
           json config, std::vector<std::string> outputs)
      : path_(out_dir / "manifest.json") {
    fs::create_directories(out_dir);
    doc_["command"] = command;
    doc_["version"] = CPAE_VERSION;
    doc_["seed"] = seed;
    doc_["config"] = std::move(config);
    doc_["outputs"] = std::move(outputs);
    doc_["started_at"] = timestamp_utc();
    write_json_atomic(path_, doc_);
  }

  void finish() {
    doc_["finished_at"] = timestamp_utc();
    write_json_atomic(path_, doc_);
  }

 private:
  fs::path path_;
  json doc_;
};

inline void emit_summary(const json& j) { std::cout << j.dump() << std::endl; }

inline PointCloud load_normalized(const fs::path& path, NormalizeTransform<float>* tf = nullptr) {
  auto [cloud, transform] = normalize_cloud(load_cloud(path));
  if (tf) *tf = transform;
  return cloud;
}

inline std::array<double, 3> parse_ratios(const std::string& s) {
  const auto cols = cpae::detail::split_csv(s);
  if (cols.size() != 3) throw ContractError("expected three comma-separated split ratios");
  return {cpae::detail::parse_double(cols[0], "--splits"),
          cpae::detail::parse_double(cols[1], "--splits"),
          cpae::detail::parse_double(cols[2], "--splits")};
}

inline PointCloud load_normalized_cloud(const PointCloud& raw) {
  return normalize_cloud(raw).first;
}

struct PairEval {
  std::vector<double> keypoint_errors;
  std::int64_t pairs = 0;
};

// Keypoint transfer over all ordered split pairs with shared ids. Errors in
// the target's normalized frame. The identity stub bypasses the model and
// snaps source keypoints straight onto the target (baseline/testing hook).
inline PairEval eval_keypoints_over_pairs(CpaeModelT<float>& model, const Dataset& ds,
                                          const std::vector<int>& split, double tau,
                                          ConfidenceMode mode, bool identity_stub,
                                          bool self_pairs) {
  std::vector<std::pair<int, int>> pairs;
  if (self_pairs) {
    for (int i : split) pairs.emplace_back(i, i);
  } else {
    pairs = enumerate_pairs(ds, split, PairRequirement::SharedKeypoints);
  }
  PairEval out;
  std::vector<PointCloud> normalized(ds.size());
  std::vector<char> have(ds.size(), 0);
  auto norm = [&](int i) -> const PointCloud& {
    if (!have[i]) {
      normalized[i] = load_normalized_cloud(ds.clouds[i]);
      have[i] = 1;
    }
    return normalized[i];
  };
  for (auto [a, b] : pairs) {
    const PointCloud& A = norm(a);
    const PointCloud& B = norm(b);
    std::vector<TransferredKeypoint> transferred;
    if (identity_stub) {
      NnIndex<float> idx(B.points);
      for (const auto& kp : A.keypoints) {
        const auto hit = idx.nearest(kp.pos);
        transferred.push_back({kp.id, B.points[hit.index], 1.0f, false});
      }
    } else {
      transferred = keypoint_transfer(A, B, model, tau, mode);
    }
    bool any = false;
    for (const auto& t : transferred) {
      for (const auto& gt : B.keypoints) {
        if (gt.id != t.id) continue;
        out.keypoint_errors.push_back(
            std::sqrt(static_cast<double>(dist2(t.position, gt.pos))));
        any = true;
      }
    }
    if (any) ++out.pairs;
  }
  return out;
}

inline PointCloud load_normalized_cloud(const PointCloud& raw) {
  return normalize_cloud(raw).first;
}

}  // namespace detail

// Entry point used by both the binary and the tests. `args` excludes the
// program name. Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(std::vector<std::string> args) {
  CLI::App app{"Canonical point autoencoder: self-supervised dense 3D correspondence"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = hardware default)");

  // ----- synth -------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate the synthetic superellipsoid benchmark");
  SynthSpec spec;
  std::string synth_out, synth_splits = "0.7,0.15,0.15", synth_format = "xyz";
  synth->add_option("--n", spec.count, "Number of shapes")->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  synth->add_option("--grid-u", spec.grid_u, "Body grid rows")->capture_default_str();
  synth->add_option("--grid-v", spec.grid_v, "Body grid columns")->capture_default_str();
  synth->add_option("--component-prob", spec.component_prob, "Optional-component probability")
      ->capture_default_str();
  synth->add_option("--exp-min", spec.exp_min, "Superellipsoid exponent lower bound")
      ->capture_default_str();
  synth->add_option("--exp-max", spec.exp_max, "Superellipsoid exponent upper bound")
      ->capture_default_str();
  synth->add_option("--splits", synth_splits, "train,val,test ratios")->capture_default_str();
  synth->add_option("--format", synth_format, "Cloud file format (xyz|cpcd)")
      ->check(CLI::IsMember({"xyz", "cpcd"}))
      ->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  // ----- train ----------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Two-stage training on a dataset directory");
  train->set_config("--config", "", "TOML-like key=value config; flags override");
  TrainConfig tc;
  std::string train_data, train_out, train_preset = "desk", train_rotation_axis = "up";
  std::string train_alpha = "step", train_stage = "both", init_from;
  bool no_cross = false;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--preset", train_preset, "Model preset (desk|paper)")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  train->add_option("--seed", tc.seed, "Training seed")->capture_default_str();
  train->add_option("--k", tc.k, "Points per cloud (0 = preset default)")->default_val(0);
  train->add_option("--batch-size", tc.batch_size, "Shapes or pairs per step")
      ->capture_default_str();
  train->add_option("--stage1-epochs", tc.stage1_epochs, "Pre-training epochs")
      ->capture_default_str();
  train->add_option("--stage2-max-steps", tc.stage2_max_steps, "Fine-tuning step cap")
      ->capture_default_str();
  train->add_option("--stage2-eval-every", tc.stage2_eval_every, "Validation interval (steps)")
      ->capture_default_str();
  train->add_option("--stage2-patience", tc.stage2_patience,
                    "Evaluations without improvement before stopping")
      ->capture_default_str();
  train->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--weight-decay", tc.weight_decay, "L2 penalty")->capture_default_str();
  train->add_option("--alpha-mode", train_alpha, "Reverse-term schedule (step|linear)")
      ->check(CLI::IsMember({"step", "linear"}))
      ->capture_default_str();
  train->add_option("--emd", tc.emd_mode, "EMD strategy (auto|exact|auction|chamfer-fallback)")
      ->check(CLI::IsMember({"auto", "exact", "auction", "chamfer-fallback"}))
      ->capture_default_str();
  train->add_option("--rotation-sigma", tc.rotation_sigma, "Rotation augmentation, radians")
      ->capture_default_str();
  train->add_option("--rotation-axis", train_rotation_axis, "Rotation axis (up|so3)")
      ->check(CLI::IsMember({"up", "so3"}))
      ->capture_default_str();
  train->add_flag("--resample-each-epoch", tc.resample_each_epoch,
                  "Fresh k-point subsample per epoch");
  train->add_option("--stage", train_stage, "Which stages to run (1|2|both)")
      ->check(CLI::IsMember({"1", "2", "both"}))
      ->capture_default_str();
  train->add_option("--init-from", init_from, "Model directory to fine-tune from");
  train->add_flag("--no-cross", no_cross, "Drop the cross-reconstruction term (ablation)");

  // ----- infer ----------------------------------------------------------------
  auto* infer = app.add_subcommand("infer", "Dense correspondence between two clouds");
  std::string infer_model, infer_source, infer_target, infer_out, infer_conf = "residual";
  double infer_tau = 0.9;
  infer->add_option("--model", infer_model, "Trained model directory")->required();
  infer->add_option("--source", infer_source, "Source cloud file")->required();
  infer->add_option("--target", infer_target, "Target cloud file")->required();
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer->add_option("--tau", infer_tau, "Confidence threshold")->capture_default_str();
  infer->add_option("--confidence-mode", infer_conf, "Confidence distance (residual|literal)")
      ->check(CLI::IsMember({"residual", "literal"}))
      ->capture_default_str();

  // ----- eval-keypoints ---------------------------------------------------------
  auto* evalkp = app.add_subcommand("eval-keypoints", "Keypoint-transfer PCK over split pairs");
  std::string ek_model, ek_data, ek_out, ek_split = "test", ek_conf = "residual", ek_stub = "none";
  double ek_tau = 0.9;
  bool ek_self_pairs = false;
  evalkp->add_option("--model", ek_model, "Trained model directory");
  evalkp->add_option("--data", ek_data, "Dataset directory")->required();
  evalkp->add_option("--out", ek_out, "Output directory")->required();
  evalkp->add_option("--split", ek_split, "Split to evaluate (train|val|test)")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  evalkp->add_option("--tau", ek_tau, "Confidence threshold")->capture_default_str();
  evalkp->add_option("--confidence-mode", ek_conf, "residual|literal")->capture_default_str();
  evalkp->add_option("--stub", ek_stub, "Replace the model (none|identity)")
      ->check(CLI::IsMember({"none", "identity"}))
      ->capture_default_str();
  evalkp->add_flag("--self-pairs", ek_self_pairs, "Pair every shape with itself");

  // ----- eval-parts ----------------------------------------------------------
  auto* evalpt = app.add_subcommand("eval-parts", "Part-label transfer IoU over split pairs");
  std::string ep_model, ep_data, ep_out, ep_split = "test", ep_conf = "residual", ep_stub = "none";
  bool ep_strict = false, ep_self_pairs = false;
  evalpt->add_option("--model", ep_model, "Trained model directory");
  evalpt->add_option("--data", ep_data, "Dataset directory")->required();
  evalpt->add_option("--out", ep_out, "Output directory")->required();
  evalpt->add_option("--split", ep_split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  evalpt->add_option("--confidence-mode", ep_conf, "residual|literal")->capture_default_str();
  evalpt->add_flag("--strict-iou", ep_strict, "Count prediction-only labels as zero IoU");
  evalpt->add_option("--stub", ep_stub, "Replace the model (none|identity)")
      ->check(CLI::IsMember({"none", "identity"}))
      ->capture_default_str();
  evalpt->add_flag("--self-pairs", ep_self_pairs, "Pair every shape with itself");

  // ----- heatmap -----------------------------------------------------------------
  auto* heatmap = app.add_subcommand("heatmap", "Confidence heatmaps for target shapes");
  std::string hm_model, hm_source, hm_out, hm_conf = "residual";
  std::vector<std::string> hm_targets;
  double hm_tau = 0.9;
  heatmap->add_option("--model", hm_model, "Trained model directory")->required();
  heatmap->add_option("--source", hm_source, "Source cloud file")->required();
  heatmap->add_option("--target", hm_targets, "Target cloud file (repeatable)")->required();
  heatmap->add_option("--out", hm_out, "Output directory")->required();
  heatmap->add_option("--tau", hm_tau, "Confidence threshold")->capture_default_str();
  heatmap->add_option("--confidence-mode", hm_conf, "residual|literal")->capture_default_str();

  // ----- export-primitive ----------------------------------------------------
  auto* exprim = app.add_subcommand("export-primitive", "Instance primitive with annotations");
  std::string xp_model, xp_source, xp_out;
  exprim->add_option("--model", xp_model, "Trained model directory")->required();
  exprim->add_option("--source", xp_source, "Source cloud file")->required();
  exprim->add_option("--out", xp_out, "Output directory")->required();

  // ----- gradcheck -------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of the numerical core");
  std::uint64_t gc_seed = 7;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "Harness seed")->capture_default_str();
  gc->add_option("--out", gc_out, "Optional output directory for gradcheck.json");

  // ----- parse ------------------------------------------------------------------
  std::vector<const char*> argv;
  argv.push_back("cpae");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << std::flush;
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  try {
    if (app.got_subcommand(synth)) {
      Dataset ds = synth_generate(spec);
      ds.splits = make_splits(ds.size(), detail::parse_ratios(synth_splits), spec.seed);
      std::vector<std::string> outputs = {"dataset.json", "keypoints.csv"};
      for (const auto& n : ds.names) outputs.push_back("clouds/" + n + "." + synth_format);
      detail::Manifest manifest(synth_out, "synth", spec.seed,
                                {{"spec", spec.to_json()},
                                 {"splits", synth_splits},
                                 {"format", synth_format}},
                                outputs);
      save_dataset(ds, synth_out, synth_format);
      manifest.finish();
      detail::emit_summary({{"command", "synth"},
                            {"status", "ok"},
                            {"shapes", ds.size()},
                            {"out", synth_out}});
      return 0;
    }

    if (app.got_subcommand(train)) {
      ModelConfig mc = ModelConfig::preset(train_preset);
      if (tc.k <= 0) tc.k = mc.points_per_cloud;
      mc.points_per_cloud = tc.k;
      tc.alpha_mode = alpha_mode_from_name(train_alpha);
      tc.rotation_axis = train_rotation_axis == "so3" ? RotationAxis::Full3d : RotationAxis::Up;
      const bool run1 = train_stage != "2";
      const bool run2 = train_stage != "1";

      json cfg = tc.to_json();
      cfg["preset"] = train_preset;
      cfg["data"] = train_data;
      cfg["stage"] = train_stage;
      cfg["no_cross"] = no_cross;
      cfg["init_from"] = init_from;
      std::vector<std::string> outputs = {"model/model.cpae", "model/model.json", "metrics.json"};
      if (run1) outputs.push_back("loss_stage1.csv");
      if (run2) outputs.push_back("loss_stage2.csv");
      detail::Manifest manifest(train_out, "train", tc.seed, cfg, outputs);

      Dataset ds = load_dataset_auto(train_data, {0.7, 0.15, 0.15}, tc.seed);
      CpaeModel model = init_from.empty() ? CpaeModel(mc, tc.seed)
                                          : CpaeModel::load(init_from);
      json metrics;
      metrics["seed"] = tc.seed;
      if (run1) {
        LossCsvWriter csv((fs::path(train_out) / "loss_stage1.csv").string());
        StageResult r1 = train_stage1(model, ds, tc, &csv);
        metrics["stage1"] = {{"steps", r1.steps},
                             {"probe_loss_init", r1.probe_loss_init},
                             {"probe_loss_final", r1.probe_loss_final},
                             {"val_sphere_adherence", r1.val_sphere_adherence}};
      }
      if (run2) {
        LossCsvWriter csv((fs::path(train_out) / "loss_stage2.csv").string());
        StageResult r2 = train_stage2(model, ds, tc, !no_cross, &csv);
        metrics["stage2"] = {{"steps", r2.steps},
                             {"val_cross_initial", r2.val_cross_initial},
                             {"val_cross_best", r2.val_cross_best},
                             {"val_sphere_adherence", r2.val_sphere_adherence}};
      }
      model.save(fs::path(train_out) / "model");
      detail::write_json_atomic(fs::path(train_out) / "metrics.json", metrics);
      manifest.finish();
      detail::emit_summary({{"command", "train"},
                            {"status", "ok"},
                            {"out", train_out},
                            {"stages_completed", model.stages_completed}});
      return 0;
    }

    if (app.got_subcommand(infer)) {
      detail::Manifest manifest(infer_out, "infer", 0,
                                {{"model", infer_model},
                                 {"source", infer_source},
                                 {"target", infer_target},
                                 {"tau", infer_tau},
                                 {"confidence_mode", infer_conf}},
                                {"correspondences.csv"});
      CpaeModel model = CpaeModel::load(infer_model);
      NormalizeTransform<float> tf_target;
      const PointCloud source = detail::load_normalized(infer_source);
      const PointCloud target = detail::load_normalized(infer_target, &tf_target);
      const auto map = transfer_set(source, target, model, infer_tau,
                                    confidence_mode_from_name(infer_conf));
      const fs::path csv_path = fs::path(infer_out) / "correspondences.csv";
      std::ofstream os(csv_path);
      if (!os) throw IoError("cannot write " + csv_path.string());
      os << "src_idx,tgt_idx,x,y,z,confidence,exists\n";
      double mean_conf = 0;
      for (const auto& row : map.rows) {
        // Decoded position reported in the target's original frame.
        const auto world = tf_target.to_world(row.decoded);
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g,%.6f,%d\n", row.source_index,
                      row.target_index, static_cast<double>(world[0]),
                      static_cast<double>(world[1]), static_cast<double>(world[2]),
                      static_cast<double>(row.confidence), row.exists ? 1 : 0);
        os << buf;
        mean_conf += row.confidence / map.rows.size();
      }
      manifest.finish();
      detail::emit_summary({{"command", "infer"},
                            {"status", "ok"},
                            {"points", map.rows.size()},
                            {"mean_confidence", mean_conf},
                            {"out", infer_out}});
      return 0;
    }

    if (app.got_subcommand(evalkp)) {
      detail::Manifest manifest(ek_out, "eval-keypoints", 0,
                                {{"model", ek_model},
                                 {"data", ek_data},
                                 {"split", ek_split},
                                 {"tau", ek_tau},
                                 {"stub", ek_stub},
                                 {"self_pairs", ek_self_pairs}},
                                {"pck.json", "pck.csv"});
      Dataset ds = load_dataset_auto(ek_data, {0.7, 0.15, 0.15}, 0);
      const std::vector<int>& split = ek_split == "train"  ? ds.splits.train
                                      : ek_split == "val" ? ds.splits.val
                                                          : ds.splits.test;
      CpaeModel model;
      if (ek_stub == "none") model = CpaeModel::load(ek_model);
      const auto eval = detail::eval_keypoints_over_pairs(
          model, ds, split, ek_tau, confidence_mode_from_name(ek_conf), ek_stub == "identity",
          ek_self_pairs);
      const PckCurve curve = pck(eval.keypoint_errors, default_pck_thresholds(), eval.pairs);
      json out = {{"thresholds", curve.thresholds},
                  {"fractions", curve.fractions},
                  {"instances", curve.instances},
                  {"pairs", curve.pairs},
                  {"pck_at_0.05", curve.at(0.05)},
                  {"pck_at_0.10", curve.at(0.10)}};
      detail::write_json_atomic(fs::path(ek_out) / "pck.json", out);
      {
        std::ofstream os(fs::path(ek_out) / "pck.csv");
        os << "threshold,fraction\n";
        for (std::size_t i = 0; i < curve.thresholds.size(); ++i)
          os << curve.thresholds[i] << "," << curve.fractions[i] << "\n";
      }
      manifest.finish();
      detail::emit_summary({{"command", "eval-keypoints"},
                            {"status", "ok"},
                            {"pck_at_0.10", curve.at(0.10)},
                            {"instances", curve.instances},
                            {"out", ek_out}});
      return 0;
    }

    if (app.got_subcommand(evalpt)) {
      detail::Manifest manifest(ep_out, "eval-parts", 0,
                                {{"model", ep_model},
                                 {"data", ep_data},
                                 {"split", ep_split},
                                 {"strict", ep_strict},
                                 {"stub", ep_stub},
                                 {"self_pairs", ep_self_pairs}},
                                {"iou.json", "iou.csv"});
      Dataset ds = load_dataset_auto(ep_data, {0.7, 0.15, 0.15}, 0);
      const std::vector<int>& split = ep_split == "train"  ? ds.splits.train
                                      : ep_split == "val" ? ds.splits.val
                                                          : ds.splits.test;
      CpaeModel model;
      if (ep_stub == "none") model = CpaeModel::load(ep_model);
      std::vector<std::pair<int, int>> pairs;
      if (ep_self_pairs) {
        for (int i : split) pairs.emplace_back(i, i);
      } else {
        pairs = enumerate_pairs(ds, split, PairRequirement::SharedLabels);
      }
      std::set<int> vocab;
      for (const auto& c : ds.clouds)
        for (int l : c.labels) vocab.insert(l);
      std::vector<IouReport> reports;
      const ConfidenceMode mode = confidence_mode_from_name(ep_conf);
      for (auto [a, b] : pairs) {
        const PointCloud A = detail::load_normalized_cloud(ds.clouds[a]);
        const PointCloud B = detail::load_normalized_cloud(ds.clouds[b]);
        if (!A.has_labels() || !B.has_labels()) continue;
        std::vector<int> transferred;
        if (ep_stub == "identity") {
          NnIndex<float> idx(A.points);
          transferred.resize(B.size());
          for (int i = 0; i < B.size(); ++i)
            transferred[i] = A.labels[idx.nearest(B.points[i]).index];
        } else {
          transferred = label_transfer(A, B, model, mode);
        }
        reports.push_back(iou(transferred, B.labels, ep_strict, &vocab));
      }
      const IouReport agg = iou_aggregate(reports);
      json per_label = json::object();
      for (const auto& [label, v] : agg.per_label) per_label[std::to_string(label)] = v;
      json out = {{"mean_iou", agg.mean_iou}, {"pairs", agg.pair_count}, {"per_label", per_label}};
      detail::write_json_atomic(fs::path(ep_out) / "iou.json", out);
      {
        std::ofstream os(fs::path(ep_out) / "iou.csv");
        os << "label,iou\n";
        for (const auto& [label, v] : agg.per_label) os << label << "," << v << "\n";
        os << "mean," << agg.mean_iou << "\n";
      }
      manifest.finish();
      detail::emit_summary({{"command", "eval-parts"},
                            {"status", "ok"},
                            {"mean_iou", agg.mean_iou},
                            {"pairs", agg.pair_count},
                            {"out", ep_out}});
      return 0;
    }

    if (app.got_subcommand(heatmap)) {
      std::vector<std::string> outputs;
      for (std::size_t i = 0; i < hm_targets.size(); ++i)
        outputs.push_back("heatmap_" + std::to_string(i) + ".csv");
      detail::Manifest manifest(hm_out, "heatmap", 0,
                                {{"model", hm_model},
                                 {"source", hm_source},
                                 {"targets", hm_targets},
                                 {"tau", hm_tau}},
                                outputs);
      CpaeModel model = CpaeModel::load(hm_model);
      const PointCloud source = detail::load_normalized(hm_source);
      std::vector<PointCloud> targets;
      std::vector<NormalizeTransform<float>> tfs;
      for (const auto& t : hm_targets) {
        NormalizeTransform<float> tf;
        targets.push_back(detail::load_normalized(t, &tf));
        tfs.push_back(tf);
      }
      const auto fields = confidence_heatmap(source, targets, model, hm_tau,
                                             confidence_mode_from_name(hm_conf));
      for (std::size_t t = 0; t < targets.size(); ++t) {
        std::ofstream os(fs::path(hm_out) / outputs[t]);
        if (!os) throw IoError("cannot write heatmap csv");
        os << "x,y,z,c\n";
        for (int i = 0; i < targets[t].size(); ++i) {
          const auto world = tfs[t].to_world(targets[t].points[i]);
          char buf[160];
          std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.6f\n", static_cast<double>(world[0]),
                        static_cast<double>(world[1]), static_cast<double>(world[2]),
                        static_cast<double>(fields[t][i]));
          os << buf;
        }
      }
      manifest.finish();
      detail::emit_summary(
          {{"command", "heatmap"}, {"status", "ok"}, {"targets", targets.size()}, {"out", hm_out}});
      return 0;
    }

    if (app.got_subcommand(exprim)) {
      detail::Manifest manifest(xp_out, "export-primitive", 0,
                                {{"model", xp_model}, {"source", xp_source}},
                                {"primitive.xyz", "primitive.keypoints.csv"});
      CpaeModel model = CpaeModel::load(xp_model);
      const PointCloud source = detail::load_normalized(xp_source);
      const PointCloud prim = export_primitive(source, model);
      save_cloud(prim, fs::path(xp_out) / "primitive.xyz");
      double adherence = 0;
      for (const auto& p : prim.points) adherence += std::abs(norm3(p) - 1.0f) / prim.size();
      manifest.finish();
      detail::emit_summary({{"command", "export-primitive"},
                            {"status", "ok"},
                            {"points", prim.size()},
                            {"mean_abs_radius_error", adherence},
                            {"out", xp_out}});
      return 0;
    }

    if (app.got_subcommand(gc)) {
      const GradCheckReport report = run_gradcheck(gc_seed);
      for (const auto& e : report.entries)
        std::fprintf(stderr, "%-28s max rel err %.3e (tol %.0e) %s\n", e.name.c_str(),
                     e.max_rel_err, e.tolerance, e.pass ? "ok" : "FAIL");
      if (!gc_out.empty()) {
        json entries = json::array();
        for (const auto& e : report.entries)
          entries.push_back({{"name", e.name},
                             {"max_rel_err", e.max_rel_err},
                             {"tolerance", e.tolerance},
                             {"pass", e.pass}});
        fs::create_directories(gc_out);
        detail::write_json_atomic(fs::path(gc_out) / "gradcheck.json",
                                  {{"entries", entries}, {"all_pass", report.all_pass}});
      }
      detail::emit_summary({{"command", "gradcheck"},
                            {"status", report.all_pass ? "ok" : "fail"},
                            {"max_layer_err", report.max_layer_err},
                            {"max_kernel_err", report.max_kernel_err},
                            {"seconds", report.seconds}});
      return report.all_pass ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    detail::emit_summary({{"status", "error"}, {"message", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    detail::emit_summary({{"status", "error"}, {"message", e.what()}});
    return 1;
  }
  return 2;
}

}  // namespace cpae::cli
