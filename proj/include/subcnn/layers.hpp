#pragma once

#include <vector>

#include "subcnn/tensor.hpp"

namespace subcnn {

struct ConvSpec {
  int kh = 3, kw = 3, cin = 0, cout = 0, stride = 1, pad = 1;
  int out_extent(int in) const { return (in + 2 * pad - kh) / stride + 1; }
};

template <typename T>
struct ConvParamsT {
  ConvSpec spec;
  TensorT<T> weight;  // (kh, kw, cin, cout)
  TensorT<T> bias;    // (cout)
  void validate() const {
    SUBCNN_CHECK(weight.rank() == 4 && weight.dim(0) == spec.kh && weight.dim(1) == spec.kw &&
                     weight.dim(2) == spec.cin && weight.dim(3) == spec.cout,
                 "conv params: weight shape != (kh,kw,cin,cout)");
    SUBCNN_CHECK(bias.rank() == 1 && bias.dim(0) == spec.cout,
                 "conv params: bias shape != (cout)");
  }
};
using ConvParams = ConvParamsT<float>;

/// RoI window in continuous feature-map coordinates; snapped to whole cells
/// (round) and clipped to the map before pooling.
struct RoiWindow {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Plain kernels (no tape) shared by inference-only paths.

/// Cross-correlation of (H,W,Cin) with (kh,kw,Cin,Cout) -> (OH,OW,Cout).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad);
/// 2x2 max pooling, stride 2, odd remainder dropped: (H,W,C) -> (H/2,W/2,C).
template <typename T>
TensorT<T> maxpool2(const TensorT<T>& x);
/// (R,in) x (in,out) + (out) -> (R,out).
template <typename T>
TensorT<T> fc(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b);
/// Max pooling of one window per RoI onto a (gh,gw) grid: -> (R,gh,gw,C).
template <typename T>
TensorT<T> roi_pool(const TensorT<T>& fmap, const std::vector<RoiWindow>& rois, int gh, int gw);
/// Numerically stable in-place softmax over n values.
template <typename T>
void softmax_inplace(T* p, int n);

// Tape-registered versions of the same ops.

template <typename T>
typename GraphT<T>::Ref conv2d(GraphT<T>& g, typename GraphT<T>::Ref x,
                               typename GraphT<T>::Ref w, typename GraphT<T>::Ref b,
                               int stride, int pad);
template <typename T>
typename GraphT<T>::Ref maxpool2(GraphT<T>& g, typename GraphT<T>::Ref x);
template <typename T>
typename GraphT<T>::Ref fc(GraphT<T>& g, typename GraphT<T>::Ref x, typename GraphT<T>::Ref w,
                           typename GraphT<T>::Ref b);
template <typename T>
typename GraphT<T>::Ref roi_pool(GraphT<T>& g, typename GraphT<T>::Ref fmap,
                                 const std::vector<RoiWindow>& rois, int gh, int gw);

/// Mean over rows of -log softmax(logits)[label]: (R,C) + R labels -> scalar.
template <typename T>
typename GraphT<T>::Ref softmax_xent(GraphT<T>& g, typename GraphT<T>::Ref logits,
                                     const std::vector<int>& labels);

/// Weighted smoothed-L1: sum_r w_r * sum_c f(pred_rc - target_rc) with
/// f(d) = 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise. Rows and weights are how
/// callers express per-RoI gating and normalization.
template <typename T>
typename GraphT<T>::Ref smooth_l1(GraphT<T>& g, typename GraphT<T>::Ref pred,
                                  const TensorT<T>& target, const std::vector<T>& row_weight);

/// out(r, j) = x(r, col_start[r] + j), j in [0, width): per-row column slice,
/// used to pick the class-conditional regression block.
template <typename T>
typename GraphT<T>::Ref gather_cols(GraphT<T>& g, typename GraphT<T>::Ref x,
                                    const std::vector<int>& col_start, int width);

}  // namespace subcnn
