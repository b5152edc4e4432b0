#include "subcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "subcnn/common.hpp"

namespace subcnn {

namespace {

// Intrinsic detection ordering: descending score, ties broken by image and
// box coordinates so results do not depend on input order.
bool det_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
  return a.theta < b.theta;
}

// Intrinsic ground-truth tie-break for equal-IoU candidates.
bool gt_before(const Annotation& a, const Annotation& b) {
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
  return a.theta < b.theta;
}

void check_images(const std::vector<Detection>& dets, size_t num_images) {
  for (const Detection& d : dets) {
    SUBCNN_CHECK(d.image_id >= 0 && static_cast<size_t>(d.image_id) < num_images,
                 "detection image_id %d outside [0, %zu)", d.image_id, num_images);
  }
}

std::vector<double> interp_grid(Interp interp) {
  std::vector<double> grid;
  if (interp == Interp::k11) {
    for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  } else {
    for (int i = 1; i <= 40; ++i) grid.push_back(i / 40.0);
  }
  return grid;
}

}  // namespace

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return "easy";
    case Difficulty::kModerate: return "moderate";
    case Difficulty::kHard: return "hard";
  }
  throw Error("difficulty_name: invalid level");
}

std::vector<Annotation> difficulty_filter(const std::vector<Annotation>& gts,
                                          Difficulty level) {
  std::vector<Annotation> out = gts;
  for (Annotation& a : out) {
    if (a.ignore) continue;
    const double h = a.box.h();
    bool keep = false;
    switch (level) {
      case Difficulty::kEasy:
        keep = h >= 40.0 && a.occlusion <= 0.0 && a.truncation <= 0.15;
        break;
      case Difficulty::kModerate:
        keep = h >= 25.0 && a.occlusion <= 0.3 && a.truncation <= 0.3;
        break;
      case Difficulty::kHard:
        keep = h >= 25.0 && a.occlusion <= 0.5 && a.truncation <= 0.5;
        break;
    }
    if (!keep) a.ignore = true;
  }
  return out;
}

PRCurve detection_sweep(const std::vector<Detection>& dets,
                        const std::vector<std::vector<Annotation>>& gts_by_image,
                        double iou_thresh, int n_views) {
  SUBCNN_CHECK(iou_thresh > 0.0 && iou_thresh <= 1.0,
               "detection_sweep: iou_thresh %g outside (0, 1]", iou_thresh);
  SUBCNN_CHECK(n_views >= 0, "detection_sweep: n_views %d < 0", n_views);
  check_images(dets, gts_by_image.size());

  // Global gt indexing: offset of each image plus position within it.
  std::vector<int> offset(gts_by_image.size() + 1, 0);
  for (size_t i = 0; i < gts_by_image.size(); ++i) {
    offset[i + 1] = offset[i] + static_cast<int>(gts_by_image[i].size());
  }
  std::vector<char> taken(static_cast<size_t>(offset.back()), 0);

  PRCurve curve;
  for (const auto& img : gts_by_image) {
    for (const Annotation& a : img) {
      if (!a.ignore) ++curve.num_gt;
    }
  }

  std::vector<Detection> sorted = dets;
  std::sort(sorted.begin(), sorted.end(), det_before);

  int tp = 0, fp = 0;
  double sim_sum = 0.0;
  for (const Detection& det : sorted) {
    const auto& gts = gts_by_image[static_cast<size_t>(det.image_id)];
    int best = -1;
    double best_iou = 0.0;
    bool ignore_hit = false;
    for (size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(det.box, gts[j].box);
      if (v < iou_thresh) continue;
      if (gts[j].ignore) {
        ignore_hit = true;
        continue;
      }
      const int gid = offset[static_cast<size_t>(det.image_id)] + static_cast<int>(j);
      if (taken[static_cast<size_t>(gid)]) continue;
      if (best < 0 || v > best_iou ||
          (v == best_iou &&
           gt_before(gts[j], gts[static_cast<size_t>(
                                 best - offset[static_cast<size_t>(det.image_id)])]))) {
        best = gid;
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(best)] = 1;
      const Annotation& gt =
          gts[static_cast<size_t>(best - offset[static_cast<size_t>(det.image_id)])];
      bool is_tp = true;
      if (n_views >= 1 &&
          orientation_bin(det.theta, n_views) != orientation_bin(gt.theta, n_views)) {
        is_tp = false;  // right box, wrong viewpoint: gt consumed, still a FP
      }
      const double sim = is_tp ? orientation_similarity(det.theta, gt.theta) : 0.0;
      if (is_tp) {
        ++tp;
        sim_sum += sim;
      } else {
        ++fp;
      }
      curve.scores.push_back(det.score);
      curve.is_tp.push_back(is_tp ? 1 : 0);
      curve.matched_gt.push_back(best);
      curve.similarity.push_back(sim);
    } else if (ignore_hit) {
      continue;  // absorbed by an ignore region: neither TP nor FP
    } else {
      ++fp;
      curve.scores.push_back(det.score);
      curve.is_tp.push_back(0);
      curve.matched_gt.push_back(-1);
      curve.similarity.push_back(0.0);
    }
    curve.recall.push_back(curve.num_gt > 0 ? static_cast<double>(tp) / curve.num_gt
                                            : 0.0);
    curve.precision.push_back(static_cast<double>(tp) / (tp + fp));
    curve.sim_ratio.push_back(sim_sum / (tp + fp));
  }
  return curve;
}

double interpolated_average(const PRCurve& curve, const std::vector<double>& values,
                            Interp interp) {
  SUBCNN_CHECK(values.size() == curve.recall.size(),
               "interpolated_average: %zu values for %zu sweep points", values.size(),
               curve.recall.size());
  const std::vector<double> grid = interp_grid(interp);
  double total = 0.0;
  for (double r : grid) {
    double best = 0.0;
    for (size_t j = 0; j < values.size(); ++j) {
      if (curve.recall[j] >= r && values[j] > best) best = values[j];
    }
    total += best;
  }
  return total / static_cast<double>(grid.size());
}

double average_precision(const std::vector<Detection>& dets,
                         const std::vector<std::vector<Annotation>>& gts_by_image,
                         double iou_thresh, Interp interp) {
  const PRCurve c = detection_sweep(dets, gts_by_image, iou_thresh, 0);
  return interpolated_average(c, c.precision, interp);
}

double average_orientation_similarity(
    const std::vector<Detection>& dets,
    const std::vector<std::vector<Annotation>>& gts_by_image, double iou_thresh,
    Interp interp) {
  const PRCurve c = detection_sweep(dets, gts_by_image, iou_thresh, 0);
  return interpolated_average(c, c.sim_ratio, interp);
}

double average_viewpoint_precision(
    const std::vector<Detection>& dets,
    const std::vector<std::vector<Annotation>>& gts_by_image, double iou_thresh,
    int n_views, Interp interp) {
  SUBCNN_CHECK(n_views == 4 || n_views == 8 || n_views == 16 || n_views == 24,
               "average_viewpoint_precision: n_views %d not in {4, 8, 16, 24}",
               n_views);
  const PRCurve c = detection_sweep(dets, gts_by_image, iou_thresh, n_views);
  return interpolated_average(c, c.precision, interp);
}

double proposal_recall(const std::vector<Detection>& proposals,
                       const std::vector<std::vector<Annotation>>& gts_by_image,
                       double iou_thresh, int budget) {
  SUBCNN_CHECK(budget >= 1, "proposal_recall: budget %d < 1", budget);
  SUBCNN_CHECK(iou_thresh > 0.0 && iou_thresh <= 1.0,
               "proposal_recall: iou_thresh %g outside (0, 1]", iou_thresh);
  check_images(proposals, gts_by_image.size());

  std::vector<std::vector<Detection>> by_image(gts_by_image.size());
  for (const Detection& p : proposals) {
    by_image[static_cast<size_t>(p.image_id)].push_back(p);
  }

  int matched = 0, total = 0;
  for (size_t i = 0; i < gts_by_image.size(); ++i) {
    const auto& gts = gts_by_image[i];
    std::vector<char> taken(gts.size(), 0);
    for (const Annotation& a : gts) {
      if (!a.ignore) ++total;
    }
    auto& props = by_image[i];
    std::sort(props.begin(), props.end(), det_before);
    if (props.size() > static_cast<size_t>(budget)) props.resize(static_cast<size_t>(budget));
    for (const Detection& p : props) {
      int best = -1;
      double best_iou = 0.0;
      for (size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].ignore || taken[j]) continue;
        const double v = iou(p.box, gts[j].box);
        if (v < iou_thresh) continue;
        if (best < 0 || v > best_iou ||
            (v == best_iou && gt_before(gts[j], gts[static_cast<size_t>(best)]))) {
          best = static_cast<int>(j);
          best_iou = v;
        }
      }
      if (best >= 0) {
        taken[static_cast<size_t>(best)] = 1;
        ++matched;
      }
    }
  }
  return total > 0 ? static_cast<double>(matched) / total : 0.0;
}

MetricReport evaluate_detections(const std::vector<Detection>& dets,
                                 const std::vector<std::vector<Annotation>>& gts_by_image,
                                 const std::vector<std::string>& class_names,
                                 const MetricConfig& config) {
  SUBCNN_CHECK(!class_names.empty(), "evaluate_detections: no class names");
  SUBCNN_CHECK(config.n_views == 4 || config.n_views == 8 || config.n_views == 16 ||
                   config.n_views == 24,
               "evaluate_detections: n_views %d not in {4, 8, 16, 24}", config.n_views);
  check_images(dets, gts_by_image.size());

  static const Difficulty kLevels[3] = {Difficulty::kEasy, Difficulty::kModerate,
                                        Difficulty::kHard};
  MetricReport report;
  report.config = config;
  for (size_t ci = 0; ci < class_names.size(); ++ci) {
    const int class_id = static_cast<int>(ci) + 1;
    ClassMetrics cm;
    cm.class_name = class_names[ci];
    cm.class_id = class_id;

    std::vector<Detection> class_dets;
    for (const Detection& d : dets) {
      if (d.class_id == class_id) class_dets.push_back(d);
    }
    cm.num_det = static_cast<int>(class_dets.size());

    // This class's annotations, plus already-ignored ones of any class which
    // stay in play as ignore regions.
    std::vector<std::vector<Annotation>> class_gts(gts_by_image.size());
    for (size_t i = 0; i < gts_by_image.size(); ++i) {
      for (const Annotation& a : gts_by_image[i]) {
        if (a.class_id == class_id || a.ignore) class_gts[i].push_back(a);
      }
    }

    PRCurve moderate_curve;
    for (int li = 0; li < 3; ++li) {
      std::vector<std::vector<Annotation>> level_gts(class_gts.size());
      for (size_t i = 0; i < class_gts.size(); ++i) {
        level_gts[i] = difficulty_filter(class_gts[i], kLevels[li]);
      }
      PRCurve curve = detection_sweep(class_dets, level_gts, config.iou_thresh, 0);
      curve.interp = config.interp;
      cm.num_gt[li] = curve.num_gt;
      cm.ap[li] = interpolated_average(curve, curve.precision, config.interp);
      cm.aos[li] = interpolated_average(curve, curve.sim_ratio, config.interp);
      const PRCurve vp =
          detection_sweep(class_dets, level_gts, config.iou_thresh, config.n_views);
      cm.avp[li] = interpolated_average(vp, vp.precision, config.interp);
      if (kLevels[li] == Difficulty::kModerate) moderate_curve = curve;
    }
    report.classes.push_back(std::move(cm));
    report.curves.push_back(std::move(moderate_curve));
  }
  return report;
}

std::string metric_report_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["iou_thresh"] = report.config.iou_thresh;
  j["n_views"] = report.config.n_views;
  j["interpolation"] = report.config.interp == Interp::k11 ? "11-point" : "40-point";
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (const ClassMetrics& cm : report.classes) {
    nlohmann::ordered_json c;
    c["name"] = cm.class_name;
    c["id"] = cm.class_id;
    c["num_det"] = cm.num_det;
    auto& levels = c["difficulties"] = nlohmann::ordered_json::object();
    static const char* kNames[3] = {"easy", "moderate", "hard"};
    for (int li = 0; li < 3; ++li) {
      nlohmann::ordered_json m;
      m["ap"] = cm.ap[li];
      m["aos"] = cm.aos[li];
      m["avp"] = cm.avp[li];
      m["num_gt"] = cm.num_gt[li];
      levels[kNames[li]] = std::move(m);
    }
    classes.push_back(std::move(c));
  }
  return j.dump(2) + "\n";
}

std::string pr_curve_csv(const PRCurve& curve) {
  std::string out = "score,recall,precision,similarity\n";
  char buf[160];
  for (size_t i = 0; i < curve.scores.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", curve.scores[i],
                  curve.recall[i], curve.precision[i], curve.sim_ratio[i]);
    out += buf;
  }
  return out;
}

}  // namespace subcnn
