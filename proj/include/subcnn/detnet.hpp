#pragma once

#include <string>
#include <vector>

#include "subcnn/eval.hpp"
#include "subcnn/pyramid.hpp"
#include "subcnn/rpn.hpp"
#include "subcnn/subcategory.hpp"

namespace subcnn {

/// Second-stage parameters: a two-layer FC trunk over the pooled window, a
/// subcategory FC whose raw output is the RoI feature vector (an embedding
/// in subcategory space), and sibling class/box heads reading that vector.
template <typename T>
struct DetParamsT {
  int grid = 6;                 ///< RoI pooling grid G (G x G)
  TensorT<T> fc1_w, fc1_b;      ///< (G*G*C, hidden), (hidden)
  TensorT<T> fc2_w, fc2_b;      ///< (hidden, hidden)
  TensorT<T> subcat_w, subcat_b;  ///< (hidden, K+1) subcategory FC
  TensorT<T> cls_w, cls_b;      ///< (K+1, K'+1)
  TensorT<T> box_w, box_b;      ///< (K+1, 4*(K'+1))
  void validate(int feature_channels, const SubcategoryTable& table) const;
};
using DetParams = DetParamsT<float>;

/// Pyramid level whose feature resolution best matches pooling the RoI onto
/// the canonical target extent: argmin over scales of
/// |log(sqrt(area)*scale / target_px)|, first index on ties. For an
/// ascending scale list, smaller RoIs map to larger (finer) scales.
int assign_scale(const Box& roi, const std::vector<double>& scales, double target_px);

/// Tape references for the ten parameter tensors plus per-level features
/// (valid extents); levels without RoIs may carry ref -1.
struct DetRefs {
  int fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
  int subcat_w = -1, subcat_b = -1;
  int cls_w = -1, cls_b = -1, box_w = -1, box_b = -1;
  std::vector<int> level_features;
};

template <typename T>
struct DetForwardT {
  typename GraphT<T>::Ref loss = -1;  ///< subcls + l1*cls + l2*[k'>=1]loc
  T subcls = 0, cls = 0, loc = 0;     ///< unweighted per-term values
  TensorT<T> subcat_logits;           ///< (R, K+1)
  TensorT<T> class_logits;            ///< (R, K'+1)
  TensorT<T> deltas;                  ///< (R, 4) label-class regression block
};

/// Joint detection loss over a labeled RoI batch: subcategory cross-entropy
/// plus l1 * class cross-entropy plus l2 * smooth-L1 on the positive RoIs'
/// class-conditional deltas, each averaged over the batch.
template <typename T>
DetForwardT<T> det_forward_loss(GraphT<T>& g, const std::vector<Roi>& rois,
                                const std::vector<LevelGeom>& geoms, int stride,
                                const DetRefs& refs, const SubcategoryTable& table,
                                int grid, T lambda1, T lambda2);

/// Per-RoI inference outputs (no tape): softmaxed distributions and the
/// class-conditional regression deltas.
struct DetOutput {
  std::vector<double> class_probs;   ///< K'+1
  std::vector<double> subcat_probs;  ///< K+1
  std::vector<BoxDelta> deltas;      ///< one per class 0..K'
};

template <typename T>
std::vector<DetOutput> det_infer(const FeaturePyramidT<T>& pyramid,
                                 const std::vector<Roi>& rois,
                                 const DetParamsT<T>& params,
                                 const SubcategoryTable& table);

/// Full single-image pipeline configuration.
struct DetectConfig {
  std::vector<double> aspect_ratios = kDefaultAspectRatios;
  int heat_keep = 2000;           ///< pre-NMS proposal candidate budget
  double proposal_nms_iou = 0.7;  ///< class-agnostic proposal NMS
  int proposal_budget = 300;      ///< proposals fed to the second stage
  double nms_iou = 0.5;           ///< final per-class NMS
  double score_thresh = 0.5;      ///< minimum class-head probability
  int image_id = 0;
  void validate() const;
};

/// Pyramid -> heat maps -> proposals -> per-class scoring, delta decoding,
/// per-class NMS. Detections carry the argmax subcategory within the
/// predicted class and that subcategory's orientation.
std::vector<Detection> detect(const Tensor& image, const Backbone& backbone,
                              const ScaleSet& scales, const ConvParams& proposal_filters,
                              const DetParams& params, const SubcategoryTable& table,
                              const DetectConfig& cfg);

/// CSV export: header plus one row per detection,
/// image_id,class,score,x1,y1,x2,y2,subcategory_id,orientation_rad.
std::string detections_to_csv(const std::vector<Detection>& dets);
std::vector<Detection> detections_from_csv(const std::string& text);

}  // namespace subcnn
