#pragma once

#include <string>
#include <vector>

#include "subcnn/eval.hpp"
#include "subcnn/pyramid.hpp"
#include "subcnn/trainer.hpp"

namespace subcnn {

/// Everything one pipeline run needs, loadable from a JSON file with
/// command-line overrides layered on top. Unknown JSON keys are rejected so a
/// typo never silently falls back to a default. The `train` sub-object
/// mirrors TrainConfig except its seed: the top-level `seed` drives every
/// stage (data generation, parameter initialization, and batch sampling all
/// derive their streams from it).
struct RunConfig {
  uint64_t seed = 0;
  int threads = 1;
  std::string out = "run";

  // Stage inputs; each stage documents which of these it reads.
  std::string dataset;     ///< dataset directory (images/ + labels.jsonl)
  std::string subcats;     ///< subcategory table JSON
  std::string rpn_model;   ///< proposal-stage checkpoint directory
  std::string det_model;   ///< detection-stage checkpoint directory
  std::string proposals;   ///< proposals CSV
  std::string detections;  ///< detections CSV

  // Synthetic dataset generation.
  int images = 100;
  int image_h = 64, image_w = 64;
  int min_objects = 1, max_objects = 3;
  double min_object_height = 16.0, max_object_height = 40.0;
  double occlusion_prob = 0.3;
  std::vector<std::string> classes;  ///< empty = the default glyph names

  // Subcategory discovery.
  int orientation_bins = 8;

  // Model shape.
  std::vector<double> scales = {0.5, 1.0, 2.0};
  int levels_between = 2;  ///< extrapolated levels between computed scales
  std::vector<double> aspect_ratios;  ///< empty = the default ratio list
  int filter_size = 5;
  int backbone_c1 = 8, backbone_c2 = 16;
  int hidden = 64;
  int grid = 6;

  // Proposal export and detection.
  int proposals_per_image = 300;
  int heat_keep = 2000;
  double proposal_nms_iou = 0.7;
  double nms_iou = 0.5;
  double score_thresh = 0.05;

  // Evaluation.
  double iou_thresh = 0.5;
  int n_views = 8;
  std::string difficulty = "moderate";

  TrainConfig train;

  void validate() const;
};

/// Parses a JSON object into a RunConfig. Missing keys keep their defaults;
/// unknown keys (top level or inside "train") are an error. An empty string
/// yields the defaults.
RunConfig run_config_from_json(const std::string& text);

/// Deterministic JSON rendering of the effective configuration.
std::string run_config_to_json(const RunConfig& cfg);

/// Applies one "key=value" override; nested keys use dots ("train.iterations").
/// The value is parsed as JSON when possible, otherwise taken as a string.
void run_config_set(RunConfig& cfg, const std::string& key, const std::string& value);

ScaleSet scale_set(const RunConfig& cfg);
Difficulty difficulty_from_name(const std::string& name);
std::vector<double> effective_aspect_ratios(const RunConfig& cfg);

/// Pipeline stages. Every stage validates the configuration, creates cfg.out,
/// echoes the effective configuration to <out>/config.json, and writes its
/// artifacts under cfg.out. Missing inputs raise Error with the path in the
/// message. All stages are deterministic given identical inputs and seed.
///
///   gen-data          -> <out>/images/, <out>/labels.jsonl
///   discover-subcats  dataset -> <out>/subcategories.json
///   train-rpn         dataset, subcats -> <out>/rpn_model/, <out>/rpn_loss.csv
///   propose           dataset, rpn_model -> <out>/proposals.csv
///   train-det         dataset, subcats, rpn_model, proposals
///                       -> <out>/det_model/, <out>/det_loss.csv
///   detect            dataset, subcats, rpn_model, det_model
///                       -> <out>/detections.csv
///   eval              dataset, subcats, detections [, proposals]
///                       -> <out>/metrics.json [, <out>/proposal_recall.json]
///   plot              dataset, subcats, detections [, proposals]
///                       -> <out>/pr_<class>.csv [, <out>/recall_curve.csv]
void run_gen_data(const RunConfig& cfg);
void run_discover_subcats(const RunConfig& cfg);
void run_train_rpn(const RunConfig& cfg);
void run_propose(const RunConfig& cfg);
void run_train_det(const RunConfig& cfg);
void run_detect(const RunConfig& cfg);
void run_eval(const RunConfig& cfg);
void run_plot(const RunConfig& cfg);

/// Dispatches a stage by its command-line name (e.g. "train-rpn").
void run_stage(const std::string& stage, const RunConfig& cfg);

}  // namespace subcnn
