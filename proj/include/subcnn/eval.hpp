#pragma once

#include <string>
#include <vector>

#include "subcnn/data.hpp"
#include "subcnn/geometry.hpp"

namespace subcnn {

/// One scored detection (or class-agnostic proposal; use class_id = 0).
/// `image_id` indexes the per-image ground-truth vector passed alongside.
struct Detection {
  int image_id = 0;
  int class_id = 0;
  Box box;
  double score = 0.0;
  int subcategory = 0;  ///< 0 when not predicted
  double theta = 0.0;   ///< predicted orientation, radians
};

enum class Difficulty { kEasy, kModerate, kHard };

const char* difficulty_name(Difficulty d);

/// Returns a copy of `gts` where every annotation that fails the difficulty
/// gate has `ignore` set. Ignored annotations stay in the list as ignore
/// regions: detections matching them count as neither true nor false
/// positives, and they never enter the recall denominator.
///   easy:     height >= 40 px, occlusion == 0,   truncation <= 0.15
///   moderate: height >= 25 px, occlusion <= 0.3, truncation <= 0.3
///   hard:     height >= 25 px, occlusion <= 0.5, truncation <= 0.5
std::vector<Annotation> difficulty_filter(const std::vector<Annotation>& gts,
                                          Difficulty level);

/// Recall-point interpolation grid for AP-style metrics: the classic 11-point
/// grid {0, 0.1, ..., 1.0} or the denser 40-point grid {1/40, ..., 40/40}.
enum class Interp { k11, k40 };

/// Full precision/recall sweep over one class. Detections are processed in
/// descending score order (ties broken by box coordinates, so the result is
/// invariant to input order); each one greedily matches the highest-IoU
/// not-yet-matched kept ground truth at IoU >= iou_thresh. Detections whose
/// only overlap is with ignore annotations are dropped from the sweep.
/// With n_views >= 1 a match additionally requires the detection's and the
/// ground truth's orientation bins to agree; a box match with the wrong bin
/// consumes the ground truth and counts as a false positive.
struct PRCurve {
  std::vector<double> scores;      ///< descending along the sweep
  std::vector<int> is_tp;          ///< 1 = true positive, 0 = false positive
  std::vector<int> matched_gt;     ///< global gt index consumed, or -1
  std::vector<double> similarity;  ///< orientation similarity of TPs, else 0
  std::vector<double> recall;      ///< cumulative, non-decreasing
  std::vector<double> precision;   ///< cumulative tp / (tp + fp)
  std::vector<double> sim_ratio;   ///< cumulative sum(similarity) / (tp + fp)
  int num_gt = 0;                  ///< kept (non-ignored) ground truths
  Interp interp = Interp::k11;     ///< grid used when summarizing this curve
};

PRCurve detection_sweep(const std::vector<Detection>& dets,
                        const std::vector<std::vector<Annotation>>& gts_by_image,
                        double iou_thresh, int n_views = 0);

/// Mean over the interpolation grid of the best value attained at recall >= r.
double interpolated_average(const PRCurve& curve, const std::vector<double>& values,
                            Interp interp);

/// Average precision for one class: greedy match by descending score, each
/// ground truth matched at most once, interpolated over the recall grid.
double average_precision(const std::vector<Detection>& dets,
                         const std::vector<std::vector<Annotation>>& gts_by_image,
                         double iou_thresh, Interp interp = Interp::k11);

/// Same sweep as average_precision with precision replaced by the cumulative
/// mean orientation similarity (false positives contribute zero similarity).
double average_orientation_similarity(
    const std::vector<Detection>& dets,
    const std::vector<std::vector<Annotation>>& gts_by_image, double iou_thresh,
    Interp interp = Interp::k11);

/// Average precision where a true positive additionally requires the
/// detection and ground truth to land in the same orientation bin.
/// n_views must be one of {4, 8, 16, 24}.
double average_viewpoint_precision(
    const std::vector<Detection>& dets,
    const std::vector<std::vector<Annotation>>& gts_by_image, double iou_thresh,
    int n_views, Interp interp = Interp::k11);

/// Fraction of kept ground truths matched one-to-one by the top-`budget`
/// proposals per image (by score) at IoU >= iou_thresh. Proposals are
/// class-agnostic; ground truths marked ignore are excluded entirely.
double proposal_recall(const std::vector<Detection>& proposals,
                       const std::vector<std::vector<Annotation>>& gts_by_image,
                       double iou_thresh, int budget);

/// Per-class, per-difficulty metric table.
struct ClassMetrics {
  std::string class_name;
  int class_id = 0;
  // Indexed by Difficulty (easy, moderate, hard).
  double ap[3] = {0, 0, 0};
  double aos[3] = {0, 0, 0};
  double avp[3] = {0, 0, 0};
  int num_gt[3] = {0, 0, 0};
  int num_det = 0;
};

struct MetricConfig {
  double iou_thresh = 0.5;
  int n_views = 8;
  Interp interp = Interp::k11;
};

struct MetricReport {
  MetricConfig config;
  std::vector<ClassMetrics> classes;
  /// Moderate-difficulty PR curve per class, aligned with `classes`.
  std::vector<PRCurve> curves;
};

/// Evaluates detections against ground truth for every class and difficulty.
/// class_names[i] names class id i + 1 (id 0 is background and never scored).
MetricReport evaluate_detections(const std::vector<Detection>& dets,
                                 const std::vector<std::vector<Annotation>>& gts_by_image,
                                 const std::vector<std::string>& class_names,
                                 const MetricConfig& config);

/// Deterministic JSON rendering of a metric report (byte-stable across runs).
std::string metric_report_json(const MetricReport& report);

/// CSV rendering of one PR curve: header score,recall,precision,similarity.
std::string pr_curve_csv(const PRCurve& curve);

}  // namespace subcnn
