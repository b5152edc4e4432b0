#include "subcnn/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace subcnn {

void ScaleSet::validate() const {
  SUBCNN_CHECK(!computed.empty(), "scale set: no computed scales");
  SUBCNN_CHECK(M >= 0, "scale set: negative M");
  for (size_t i = 0; i < computed.size(); ++i) {
    SUBCNN_CHECK(computed[i] > 0, "scale set: non-positive scale");
    SUBCNN_CHECK(i == 0 || computed[i] > computed[i - 1], "scale set: not strictly increasing");
  }
}

namespace {

int image_extent(int original, double scale) {
  return static_cast<int>(std::lround(original * scale));
}

}  // namespace

std::vector<LevelGeom> pyramid_geometry(const ScaleSet& ss, int image_h, int image_w,
                                        int stride) {
  ss.validate();
  const int N = static_cast<int>(ss.computed.size());
  std::vector<LevelGeom> out;
  out.reserve(ss.expanded_count());
  auto push = [&](double scale, bool computed, int src) {
    LevelGeom g;
    g.scale = scale;
    g.is_computed = computed;
    g.src = computed ? static_cast<int>(out.size()) : src;
    g.img_h = image_extent(image_h, scale);
    g.img_w = image_extent(image_w, scale);
    g.feat_h = g.img_h / stride;
    g.feat_w = g.img_w / stride;
    out.push_back(g);
  };
  for (int i = 0; i < N; ++i) {
    push(ss.computed[i], true, -1);
    if (i + 1 == N) break;
    int lo_idx = static_cast<int>(out.size()) - 1;
    int hi_idx = lo_idx + ss.M + 1;  // where computed[i+1] will land
    double ratio = ss.computed[i + 1] / ss.computed[i];
    for (int j = 1; j <= ss.M; ++j) {
      double frac = static_cast<double>(j) / (ss.M + 1);
      double s = ss.computed[i] * std::pow(ratio, frac);
      // Nearest flanking computed scale in log space; tie -> the finer one.
      int src = frac < 0.5 ? lo_idx : hi_idx;
      push(s, false, src);
    }
  }
  return out;
}

template <typename T>
TensorT<T> BackboneT<T>::forward(const TensorT<T>& image) const {
  conv1.validate();
  conv2.validate();
  TensorT<T> x = conv2d(image, conv1.weight, conv1.bias, 1, 1);
  for (auto& v : x.data) v = std::max(v, T(0));
  x = maxpool2(x);
  x = conv2d(x, conv2.weight, conv2.bias, 1, 1);
  for (auto& v : x.data) v = std::max(v, T(0));
  return maxpool2(x);
}

template struct BackboneT<float>;
template struct BackboneT<double>;

Backbone make_backbone(int in_channels, int c1, int c2) {
  Backbone bb;
  bb.conv1.spec = {3, 3, in_channels, c1, 1, 1};
  bb.conv1.weight = Tensor::zeros({3, 3, in_channels, c1});
  bb.conv1.bias = Tensor::zeros({c1});
  bb.conv2.spec = {3, 3, c1, c2, 1, 1};
  bb.conv2.weight = Tensor::zeros({3, 3, c1, c2});
  bb.conv2.bias = Tensor::zeros({c2});
  return bb;
}

template <typename T>
typename GraphT<T>::Ref backbone_forward(GraphT<T>& g, typename GraphT<T>::Ref image,
                                         const BackboneRefs& p) {
  auto x = conv2d(g, image, p.w1, p.b1, 1, 1);
  x = maxpool2(g, g.relu(x));
  x = conv2d(g, x, p.w2, p.b2, 1, 1);
  return maxpool2(g, g.relu(x));
}

template GraphT<float>::Ref backbone_forward<float>(GraphT<float>&, GraphT<float>::Ref,
                                                    const BackboneRefs&);
template GraphT<double>::Ref backbone_forward<double>(GraphT<double>&, GraphT<double>::Ref,
                                                      const BackboneRefs&);

template <typename T>
std::vector<TensorT<T>> build_image_pyramid(const TensorT<T>& image,
                                            const std::vector<double>& scales, int min_extent) {
  SUBCNN_CHECK(image.rank() == 3, "image pyramid: image must be (H,W,C)");
  std::vector<TensorT<T>> out;
  out.reserve(scales.size());
  for (double s : scales) {
    int h = image_extent(image.dim(0), s), w = image_extent(image.dim(1), s);
    SUBCNN_CHECK(h >= min_extent && w >= min_extent,
                 "image pyramid: scale %.3f gives %dx%d, below the receptive field %d", s, h, w,
                 min_extent);
    out.push_back(bilinear_resize(image, h, w));
  }
  return out;
}

template std::vector<TensorT<float>> build_image_pyramid<float>(const TensorT<float>&,
                                                                const std::vector<double>&, int);
template std::vector<TensorT<double>> build_image_pyramid<double>(
    const TensorT<double>&, const std::vector<double>&, int);

template <typename T>
TensorT<T> pad_to(const TensorT<T>& m, int H, int W) {
  if (m.dim(0) == H && m.dim(1) == W) return m;
  int C = m.dim(2);
  TensorT<T> out = TensorT<T>::zeros({H, W, C});
  for (int y = 0; y < m.dim(0); ++y)
    std::copy(&m.data[static_cast<int64_t>(y) * m.dim(1) * C],
              &m.data[static_cast<int64_t>(y) * m.dim(1) * C] + m.dim(1) * C,
              &out.data[static_cast<int64_t>(y) * W * C]);
  return out;
}

template <typename T>
TensorT<T> crop_valid(const TensorT<T>& m, int h, int w) {
  if (m.dim(0) == h && m.dim(1) == w) return m;
  int C = m.dim(2);
  TensorT<T> out = TensorT<T>::zeros({h, w, C});
  for (int y = 0; y < h; ++y)
    std::copy(&m.data[static_cast<int64_t>(y) * m.dim(1) * C],
              &m.data[static_cast<int64_t>(y) * m.dim(1) * C] + w * C,
              &out.data[static_cast<int64_t>(y) * w * C]);
  return out;
}

template TensorT<float> pad_to<float>(const TensorT<float>&, int, int);
template TensorT<double> pad_to<double>(const TensorT<double>&, int, int);
template TensorT<float> crop_valid<float>(const TensorT<float>&, int, int);
template TensorT<double> crop_valid<double>(const TensorT<double>&, int, int);

template <typename T>
FeaturePyramidT<T> build_feature_pyramid(const TensorT<T>& image, const BackboneT<T>& bb,
                                         const ScaleSet& ss, int threads) {
  auto geoms = pyramid_geometry(ss, image.dim(0), image.dim(1), BackboneT<T>::kStride);
  const int n = static_cast<int>(geoms.size());
  FeaturePyramidT<T> pyr;
  pyr.stride = BackboneT<T>::kStride;
  pyr.channels = bb.out_channels();
  pyr.common_h = geoms.back().feat_h;
  pyr.common_w = geoms.back().feat_w;
  pyr.orig_h = image.dim(0);
  pyr.orig_w = image.dim(1);
  pyr.levels.resize(n);

  // Computed levels first: each runs the backbone on its rescaled image.
  std::vector<int> computed_idx;
  for (int i = 0; i < n; ++i)
    if (geoms[i].is_computed) computed_idx.push_back(i);
  parallel_for(static_cast<int64_t>(computed_idx.size()), threads, [&](int64_t k) {
    int i = computed_idx[k];
    TensorT<T> img = bilinear_resize(image, geoms[i].img_h, geoms[i].img_w);
    TensorT<T> feat = bb.forward(img);
    SUBCNN_CHECK(feat.dim(0) == geoms[i].feat_h && feat.dim(1) == geoms[i].feat_w,
                 "feature pyramid: backbone stride mismatch");
    pyr.levels[i].features = std::move(feat);
    pyr.levels[i].geom = geoms[i];
  });

  // Extrapolated levels resample the valid region of their source map to the
  // extents the backbone would have produced at that scale.
  parallel_for(n, threads, [&](int64_t i) {
    if (geoms[i].is_computed) return;
    const TensorT<T>& src = pyr.levels[geoms[i].src].features;
    pyr.levels[i].features = bilinear_resize(src, geoms[i].feat_h, geoms[i].feat_w);
    pyr.levels[i].geom = geoms[i];
  });

  for (auto& lvl : pyr.levels) lvl.features = pad_to(lvl.features, pyr.common_h, pyr.common_w);
  return pyr;
}

template FeaturePyramidT<float> build_feature_pyramid<float>(const TensorT<float>&,
                                                             const BackboneT<float>&,
                                                             const ScaleSet&, int);
template FeaturePyramidT<double> build_feature_pyramid<double>(const TensorT<double>&,
                                                               const BackboneT<double>&,
                                                               const ScaleSet&, int);

template <typename T>
TensorT<T> features_at_scale(const TensorT<T>& image, const BackboneT<T>& bb, double scale) {
  int h = image_extent(image.dim(0), scale), w = image_extent(image.dim(1), scale);
  return bb.forward(bilinear_resize(image, h, w));
}

template TensorT<float> features_at_scale<float>(const TensorT<float>&, const BackboneT<float>&,
                                                 double);
template TensorT<double> features_at_scale<double>(const TensorT<double>&,
                                                   const BackboneT<double>&, double);

void dump_pyramid(const std::string& dir, const FeaturePyramid& pyr) {
  std::string manifest = dir + "/manifest.txt";
  FILE* fp = fopen(manifest.c_str(), "w");
  SUBCNN_CHECK(fp, "pyramid dump: cannot write %s", manifest.c_str());
  fprintf(fp, "count=%d\nstride=%d\n", static_cast<int>(pyr.levels.size()), pyr.stride);
  for (size_t i = 0; i < pyr.levels.size(); ++i) {
    char name[64];
    snprintf(name, sizeof(name), "level_%02d.tns", static_cast<int>(i));
    save_tensor(dir + "/" + name, pyr.levels[i].features);
    fprintf(fp, "level_%02d.file=%s\nlevel_%02d.scale=%.10g\nlevel_%02d.provenance=%s\n",
            static_cast<int>(i), name, static_cast<int>(i), pyr.levels[i].geom.scale,
            static_cast<int>(i), pyr.levels[i].geom.is_computed ? "computed" : "extrapolated");
  }
  SUBCNN_CHECK(fclose(fp) == 0, "pyramid dump: close failed");
}

}  // namespace subcnn
