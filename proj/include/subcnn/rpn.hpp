#pragma once

#include <string>
#include <vector>

#include "subcnn/data.hpp"
#include "subcnn/geometry.hpp"
#include "subcnn/pyramid.hpp"
#include "subcnn/subcategory.hpp"

namespace subcnn {

/// Per-level subcategory heat maps: raw logits of shape
/// (feat_h, feat_w, K+1) at each level's valid feature extents.
template <typename T>
struct HeatMapStackT {
  std::vector<TensorT<T>> maps;
  std::vector<double> scales;  ///< pyramid scale factor per map
  int stride = 0;              ///< feature stride S
  int filter_size = 0;         ///< conv window F (odd)
  int img_h = 0, img_w = 0;    ///< unscaled image extents, for clipping

  int levels() const { return static_cast<int>(maps.size()); }
  int channels() const { return maps.empty() ? 0 : maps[0].dim(2); }
};
using HeatMapStack = HeatMapStackT<float>;

/// A region-of-interest candidate produced from one heat-map location.
/// Score and subcategory come from the softmaxed channel distribution at
/// that location: score is the largest non-background probability.
struct Roi {
  Box box;              ///< image pixels, clipped and valid
  int scale_index = 0;  ///< pyramid level the box came from
  int r = 0, c = 0;     ///< heat-map location
  double score = 0.0;
  int subcategory_argmax = 0;  ///< best non-background channel (1..K)
  // Training labels (filled by generate_rois_train):
  int label_subcategory = 0;  ///< k*, 0 = background
  int label_class = 0;        ///< k'*, 0 = background
  BoxDelta target;            ///< t*, meaningful when label_class >= 1
};

/// Same-padding convolution of every pyramid level's valid feature region
/// with the subcategory filters; one output channel per subcategory plus
/// background. Runs outside any gradient tape: proposal scoring is data,
/// not a differentiable path.
template <typename T>
HeatMapStackT<T> subcategory_conv(const FeaturePyramidT<T>& pyramid,
                                  const ConvParamsT<T>& filters);

/// The fixed aspect-ratio sweep attached to every canonical box.
extern const std::vector<double> kDefaultAspectRatios;

/// Boxes for one heat-map location: the canonical F-by-F window mapped to
/// image pixels (center ((c+0.5)S/scale, (r+0.5)S/scale), side F*S/scale)
/// plus one equal-area box per aspect ratio a (height/width = a); a ratio
/// reproducing the canonical box exactly is dropped. Unclipped.
std::vector<Box> candidate_boxes(int r, int c, int filter_size, int stride,
                                 double scale, const std::vector<double>& ratios);

/// Whether a box still covers at least one feature cell at the given level
/// once snapped the way RoI pooling snaps (round to nearest cell, clamp).
bool roi_snaps_nonempty(const Box& box, double scale, int stride, int feat_h,
                        int feat_w);

/// Score threshold that keeps roughly `keep` of the highest-scoring heat-map
/// locations (strictly-greater comparison; ties may keep fewer).
template <typename T>
double percentile_threshold(const HeatMapStackT<T>& heat, int keep);

/// Test-time RoI generation: every location whose score exceeds `threshold`
/// emits its candidate boxes; boxes are clipped to the image, empty ones
/// dropped, and the top_n highest-scoring kept.
template <typename T>
std::vector<Roi> generate_rois_test(const HeatMapStackT<T>& heat, double threshold,
                                    const std::vector<double>& ratios, int top_n);

/// Class-agnostic NMS followed by a budget cut, for exporting proposals.
std::vector<Roi> select_proposals(const std::vector<Roi>& rois, double nms_iou,
                                  int budget);

/// Training-time RoI generation with hard mining: enumerate all candidates,
/// label positive at IoU >= iou_pos against some gt (copying its subcategory,
/// class, and box target), negative below iou_neg against every gt; then keep
/// the round(R*alpha) lowest-scoring positives and the rest highest-scoring
/// negatives, cycling each pool to fill its quota. Ground truths flagged
/// ignore exclude nearby candidates from the negative pool. With no usable
/// positives the batch is all negatives (with a warning).
template <typename T>
std::vector<Roi> generate_rois_train(const HeatMapStackT<T>& heat,
                                     const std::vector<Annotation>& gts, int R,
                                     double alpha, double iou_pos = 0.7,
                                     double iou_neg = 0.3);

/// Learnable proposal-network parameters. The subcategory filters double as
/// the pooled-path classifier: RoI pooling onto an F-by-F grid followed by a
/// fully connected layer whose weight is the row-major flattening of the
/// conv weight reproduces the heat-map logits exactly.
template <typename T>
struct RpnParamsT {
  ConvParamsT<T> subcat;  ///< (F,F,C,K+1) + bias (K+1)
  TensorT<T> bbox_w;      ///< (F*F*C, 4*(num_classes+1))
  TensorT<T> bbox_b;      ///< (4*(num_classes+1))
  int num_classes = 0;    ///< K'
  void validate(int feature_channels, int K) const;
};
using RpnParams = RpnParamsT<float>;

/// Tape references for the four parameter tensors plus per-level features.
/// Levels without RoIs may carry ref -1.
struct RpnRefs {
  int subcat_w = -1, subcat_b = -1, bbox_w = -1, bbox_b = -1;
  std::vector<int> level_features;  ///< valid-extent (h,w,C) map per level
};

template <typename T>
struct RpnForwardT {
  typename GraphT<T>::Ref loss = -1;  ///< scalar: subcls + lambda-gated loc
  T subcls = 0, loc = 0;              ///< loss breakdown (loc includes lambda)
  TensorT<T> logits;                  ///< (R, K+1) per-RoI subcategory logits
  TensorT<T> deltas;                  ///< (R, 4) class-gated box deltas
};

/// Joint proposal loss over a labeled RoI batch: cross-entropy over
/// subcategory logits plus lambda * smooth-L1 on the positive RoIs'
/// class-conditional box deltas, both averaged over the batch. Gradients
/// flow through RoI pooling into the features and parameters; the heat maps
/// that selected the RoIs are not part of the graph.
template <typename T>
RpnForwardT<T> rpn_forward_loss(GraphT<T>& g, const std::vector<Roi>& rois,
                                const std::vector<LevelGeom>& geoms, int stride,
                                const RpnRefs& refs, const SubcategoryTable& table,
                                T lambda);

/// CSV export: header plus one row per proposal per image,
/// image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax.
std::string proposals_to_csv(const std::vector<std::vector<Roi>>& per_image);
std::vector<std::vector<Roi>> proposals_from_csv(const std::string& text);

}  // namespace subcnn
