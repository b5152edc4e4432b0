#pragma once

#include <string>
#include <vector>

#include "subcnn/layers.hpp"

namespace subcnn {

/// Computed pyramid scales plus the number of extrapolated scales inserted
/// between each adjacent pair. Expanded count: (N-1)*M + N.
struct ScaleSet {
  std::vector<double> computed;
  int M = 0;
  void validate() const;
  int expanded_count() const {
    return (static_cast<int>(computed.size()) - 1) * M + static_cast<int>(computed.size());
  }
};

/// One entry of the expanded scale list.
struct LevelGeom {
  double scale = 1.0;
  bool is_computed = false;
  int src = -1;     // expanded index of the computed level this one resamples
  int img_h = 0, img_w = 0;    // round(original * scale)
  int feat_h = 0, feat_w = 0;  // backbone map extents for that image size
};

/// Geometrically spaced intermediates between adjacent computed scales;
/// each intermediate points at its nearest computed scale in log space
/// (ties toward the larger/finer scale). Ascending order.
std::vector<LevelGeom> pyramid_geometry(const ScaleSet& ss, int image_h, int image_w,
                                        int stride);

/// Fixed two-stage feature extractor: conv3x3(->16) relu pool2,
/// conv3x3(->32) relu pool2. Stride 4, receptive field 10 px.
template <typename T>
struct BackboneT {
  ConvParamsT<T> conv1, conv2;
  static constexpr int kStride = 4;
  static constexpr int kReceptiveField = 10;
  int out_channels() const { return conv2.spec.cout; }
  TensorT<T> forward(const TensorT<T>& image) const;
};
using Backbone = BackboneT<float>;

Backbone make_backbone(int in_channels, int c1, int c2);

/// Tape refs for the backbone parameters, for training-mode forwards.
struct BackboneRefs {
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
template <typename T>
typename GraphT<T>::Ref backbone_forward(GraphT<T>& g, typename GraphT<T>::Ref image,
                                         const BackboneRefs& p);

template <typename T>
struct PyramidLevelT {
  TensorT<T> features;  // (common_h, common_w, C), zero-padded past valid extents
  LevelGeom geom;
};

template <typename T>
struct FeaturePyramidT {
  std::vector<PyramidLevelT<T>> levels;  // ascending scale
  int common_h = 0, common_w = 0, channels = 0, stride = 0;
  int orig_h = 0, orig_w = 0;  // unscaled input image extents
};
using FeaturePyramid = FeaturePyramidT<float>;

/// Rescales the image to round(original * scale) per scale. Every output
/// extent must stay >= the backbone receptive field.
template <typename T>
std::vector<TensorT<T>> build_image_pyramid(const TensorT<T>& image,
                                            const std::vector<double>& scales, int min_extent);

/// Runs the backbone over the computed scales only and fills the remaining
/// levels by resampling each one's nearest computed map, all zero-padded to
/// the largest scale's map extents.
template <typename T>
FeaturePyramidT<T> build_feature_pyramid(const TensorT<T>& image, const BackboneT<T>& bb,
                                         const ScaleSet& ss, int threads = 1);

/// Explicit single-scale features (the reference the extrapolated levels
/// approximate): backbone applied to the rescaled image.
template <typename T>
TensorT<T> features_at_scale(const TensorT<T>& image, const BackboneT<T>& bb, double scale);

/// Zero-pads (H,W,C) on the bottom/right to the given extents.
template <typename T>
TensorT<T> pad_to(const TensorT<T>& m, int H, int W);
/// Top-left (h,w,C) window of a padded map.
template <typename T>
TensorT<T> crop_valid(const TensorT<T>& m, int h, int w);

/// One tensor file per level plus a key=value manifest.
void dump_pyramid(const std::string& dir, const FeaturePyramid& pyr);

}  // namespace subcnn
