#include "subcnn/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <sstream>

#include "subcnn/layers.hpp"

namespace subcnn {

const std::vector<double> kDefaultAspectRatios = {3.0, 2.0, 1.5, 1.0, 0.75, 0.5, 0.25};

bool roi_snaps_nonempty(const Box& b, double scale, int stride, int feat_h, int feat_w) {
  const double f = scale / stride;
  const int x1 = std::clamp(static_cast<int>(std::llround(b.x1 * f)), 0, feat_w);
  const int x2 = std::clamp(static_cast<int>(std::llround(b.x2 * f)), 0, feat_w);
  const int y1 = std::clamp(static_cast<int>(std::llround(b.y1 * f)), 0, feat_h);
  const int y2 = std::clamp(static_cast<int>(std::llround(b.y2 * f)), 0, feat_h);
  return x2 > x1 && y2 > y1;
}

namespace {

// Softmax the (K+1) channel logits at one location; returns the largest
// non-background probability and its channel.
template <typename T>
void location_score(const TensorT<T>& map, int r, int c, double* score, int* argmax) {
  const int C = map.dim(2);
  std::vector<double> p(static_cast<size_t>(C));
  for (int k = 0; k < C; ++k) p[static_cast<size_t>(k)] = static_cast<double>(map.at(r, c, k));
  softmax_inplace(p.data(), C);
  double best = -1.0;
  int bi = 1;
  for (int k = 1; k < C; ++k) {
    if (p[static_cast<size_t>(k)] > best) {
      best = p[static_cast<size_t>(k)];
      bi = k;
    }
  }
  *score = best;
  *argmax = bi;
}

template <typename T>
void check_heat(const HeatMapStackT<T>& heat) {
  SUBCNN_CHECK(!heat.maps.empty(), "heat maps: empty stack");
  SUBCNN_CHECK(heat.maps.size() == heat.scales.size(),
               "heat maps: %zu maps vs %zu scales", heat.maps.size(), heat.scales.size());
  SUBCNN_CHECK(heat.stride >= 1 && heat.filter_size >= 1,
               "heat maps: stride/filter unset");
  SUBCNN_CHECK(heat.img_h >= 1 && heat.img_w >= 1, "heat maps: image extents unset");
  for (const auto& m : heat.maps) {
    SUBCNN_CHECK(m.rank() == 3 && m.dim(2) == heat.maps[0].dim(2),
                 "heat maps: inconsistent channel counts");
    SUBCNN_CHECK(m.dim(2) >= 2, "heat maps: need background + at least one channel");
  }
}

// All candidates of one heat-map stack in deterministic enumeration order
// (level, row, column, canonical-then-ratios), clipped, degenerate drops.
template <typename T>
std::vector<Roi> enumerate_candidates(const HeatMapStackT<T>& heat,
                                      const std::vector<double>& ratios,
                                      double threshold) {
  std::vector<Roi> out;
  for (int l = 0; l < heat.levels(); ++l) {
    const TensorT<T>& map = heat.maps[static_cast<size_t>(l)];
    const double scale = heat.scales[static_cast<size_t>(l)];
    for (int r = 0; r < map.dim(0); ++r) {
      for (int c = 0; c < map.dim(1); ++c) {
        double score;
        int argmax;
        location_score(map, r, c, &score, &argmax);
        if (!(score > threshold)) continue;
        for (const Box& raw :
             candidate_boxes(r, c, heat.filter_size, heat.stride, scale, ratios)) {
          Box b = clip_box(raw, heat.img_w, heat.img_h);
          if (!b.valid()) continue;
          if (!roi_snaps_nonempty(b, scale, heat.stride, map.dim(0), map.dim(1))) continue;
          Roi roi;
          roi.box = b;
          roi.scale_index = l;
          roi.r = r;
          roi.c = c;
          roi.score = score;
          roi.subcategory_argmax = argmax;
          out.push_back(roi);
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
HeatMapStackT<T> subcategory_conv(const FeaturePyramidT<T>& pyramid,
                                  const ConvParamsT<T>& filters) {
  filters.validate();
  SUBCNN_CHECK(filters.spec.kh == filters.spec.kw, "subcategory conv: window not square");
  SUBCNN_CHECK(filters.spec.kh % 2 == 1, "subcategory conv: window must be odd");
  SUBCNN_CHECK(filters.spec.cin == pyramid.channels,
               "subcategory conv: %d input channels, pyramid has %d", filters.spec.cin,
               pyramid.channels);
  SUBCNN_CHECK(filters.spec.cout >= 2, "subcategory conv: need background + subcategories");
  SUBCNN_CHECK(!pyramid.levels.empty(), "subcategory conv: empty pyramid");
  SUBCNN_CHECK(pyramid.orig_h >= 1 && pyramid.orig_w >= 1,
               "subcategory conv: pyramid lacks image extents");

  const int F = filters.spec.kh;
  HeatMapStackT<T> heat;
  heat.stride = pyramid.stride;
  heat.filter_size = F;
  heat.img_h = pyramid.orig_h;
  heat.img_w = pyramid.orig_w;
  for (const auto& lvl : pyramid.levels) {
    TensorT<T> valid = crop_valid(lvl.features, lvl.geom.feat_h, lvl.geom.feat_w);
    heat.maps.push_back(conv2d(valid, filters.weight, filters.bias, 1, F / 2));
    heat.scales.push_back(lvl.geom.scale);
  }
  return heat;
}

std::vector<Box> candidate_boxes(int r, int c, int filter_size, int stride, double scale,
                                 const std::vector<double>& ratios) {
  SUBCNN_CHECK(filter_size >= 1 && stride >= 1, "candidate boxes: bad geometry");
  SUBCNN_CHECK(scale > 0, "candidate boxes: scale %g <= 0", scale);
  const double unit = static_cast<double>(stride) / scale;
  const double cx = (c + 0.5) * unit;
  const double cy = (r + 0.5) * unit;
  const double side = filter_size * unit;
  std::vector<Box> out = {box_from_center(cx, cy, side, side)};
  for (double a : ratios) {
    SUBCNN_CHECK(a > 0, "candidate boxes: aspect ratio %g <= 0", a);
    const double root = std::sqrt(a);
    Box b = box_from_center(cx, cy, side / root, side * root);
    if (b.x1 == out[0].x1 && b.y1 == out[0].y1 && b.x2 == out[0].x2 && b.y2 == out[0].y2) {
      continue;  // the a = 1 variant reproduces the canonical box
    }
    out.push_back(b);
  }
  return out;
}

template <typename T>
double percentile_threshold(const HeatMapStackT<T>& heat, int keep) {
  check_heat(heat);
  SUBCNN_CHECK(keep >= 1, "percentile threshold: keep %d < 1", keep);
  std::vector<double> scores;
  for (const auto& map : heat.maps) {
    for (int r = 0; r < map.dim(0); ++r) {
      for (int c = 0; c < map.dim(1); ++c) {
        double s;
        int arg;
        location_score(map, r, c, &s, &arg);
        scores.push_back(s);
      }
    }
  }
  if (static_cast<int>(scores.size()) <= keep) {
    return *std::min_element(scores.begin(), scores.end()) - 1.0;
  }
  std::nth_element(scores.begin(), scores.begin() + keep, scores.end(),
                   std::greater<double>());
  return scores[static_cast<size_t>(keep)];
}

template <typename T>
std::vector<Roi> generate_rois_test(const HeatMapStackT<T>& heat, double threshold,
                                    const std::vector<double>& ratios, int top_n) {
  check_heat(heat);
  SUBCNN_CHECK(std::isfinite(threshold), "roi generation: threshold must be finite");
  SUBCNN_CHECK(top_n >= 1, "roi generation: top_n %d < 1", top_n);
  std::vector<Roi> rois = enumerate_candidates(heat, ratios, threshold);
  std::stable_sort(rois.begin(), rois.end(),
                   [](const Roi& a, const Roi& b) { return a.score > b.score; });
  if (rois.size() > static_cast<size_t>(top_n)) rois.resize(static_cast<size_t>(top_n));
  return rois;
}

std::vector<Roi> select_proposals(const std::vector<Roi>& rois, double nms_iou,
                                  int budget) {
  SUBCNN_CHECK(nms_iou > 0 && nms_iou <= 1, "proposal nms: iou %g outside (0,1]", nms_iou);
  SUBCNN_CHECK(budget >= 1, "proposal budget %d < 1", budget);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const Roi& r : rois) {
    boxes.push_back(r.box);
    scores.push_back(r.score);
  }
  std::vector<Roi> out;
  for (int idx : nms(boxes, scores, nms_iou)) {
    out.push_back(rois[static_cast<size_t>(idx)]);
    if (static_cast<int>(out.size()) == budget) break;
  }
  return out;
}

template <typename T>
std::vector<Roi> generate_rois_train(const HeatMapStackT<T>& heat,
                                     const std::vector<Annotation>& gts, int R,
                                     double alpha, double iou_pos, double iou_neg) {
  check_heat(heat);
  SUBCNN_CHECK(R >= 1, "hard mining: R %d < 1", R);
  SUBCNN_CHECK(alpha > 0 && alpha < 1, "hard mining: alpha %g outside (0,1)", alpha);
  SUBCNN_CHECK(iou_neg > 0 && iou_neg < iou_pos && iou_pos <= 1,
               "hard mining: need 0 < iou_neg < iou_pos <= 1, got %g/%g", iou_neg, iou_pos);

  const std::vector<Roi> cands =
      enumerate_candidates(heat, kDefaultAspectRatios,
                           -std::numeric_limits<double>::max());

  std::vector<Roi> positives, negatives;
  for (const Roi& cand : cands) {
    double best_iou = 0.0, ignore_iou = 0.0;
    int best_gt = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      const double v = iou(cand.box, gts[gi].box);
      if (gts[gi].ignore) {
        ignore_iou = std::max(ignore_iou, v);
        continue;
      }
      if (v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_pos) {
      const Annotation& gt = gts[static_cast<size_t>(best_gt)];
      SUBCNN_CHECK(gt.class_id >= 1, "hard mining: positive gt with class 0");
      SUBCNN_CHECK(gt.subcategory >= 1,
                   "hard mining: gt lacks a subcategory assignment");
      Roi roi = cand;
      roi.label_subcategory = gt.subcategory;
      roi.label_class = gt.class_id;
      roi.target = encode_box(roi.box, gt.box);
      positives.push_back(roi);
    } else if (best_iou < iou_neg && ignore_iou < iou_neg) {
      negatives.push_back(cand);  // labels stay 0
    }
  }

  int n_pos = static_cast<int>(std::lround(R * alpha));
  int n_neg = R - n_pos;
  if (positives.empty()) {
    if (gts.empty()) {
      SUBCNN_WARN("hard mining: no ground truth; emitting an all-negative batch");
    } else {
      SUBCNN_WARN("hard mining: no candidate reached iou %g; all-negative batch", iou_pos);
    }
    n_pos = 0;
    n_neg = R;
  } else if (negatives.empty()) {
    SUBCNN_WARN("hard mining: no negatives below iou %g; all-positive batch", iou_neg);
    n_pos = R;
    n_neg = 0;
  }
  SUBCNN_CHECK(!positives.empty() || !negatives.empty(),
               "hard mining: no usable candidates at all");

  // Hard examples: the lowest-scoring positives, the highest-scoring
  // negatives. Stable sorts on the deterministic enumeration order keep
  // selection bit-identical across runs.
  std::stable_sort(positives.begin(), positives.end(),
                   [](const Roi& a, const Roi& b) { return a.score < b.score; });
  std::stable_sort(negatives.begin(), negatives.end(),
                   [](const Roi& a, const Roi& b) { return a.score > b.score; });

  auto take = [](const std::vector<Roi>& pool, int quota) {
    std::vector<Roi> out;
    out.reserve(static_cast<size_t>(quota));
    for (int i = 0; i < quota; ++i) {
      out.push_back(pool[static_cast<size_t>(i) % pool.size()]);  // cycle-pad
    }
    return out;
  };
  std::vector<Roi> batch = n_pos > 0 ? take(positives, n_pos) : std::vector<Roi>{};
  if (n_neg > 0) {
    for (Roi& r : take(negatives, n_neg)) batch.push_back(std::move(r));
  }
  return batch;
}

template <typename T>
void RpnParamsT<T>::validate(int feature_channels, int K) const {
  subcat.validate();
  SUBCNN_CHECK(subcat.spec.kh == subcat.spec.kw && subcat.spec.kh % 2 == 1,
               "rpn params: subcategory window must be square and odd");
  SUBCNN_CHECK(subcat.spec.cin == feature_channels,
               "rpn params: %d input channels, features have %d", subcat.spec.cin,
               feature_channels);
  SUBCNN_CHECK(subcat.spec.cout == K + 1, "rpn params: %d channels for K=%d",
               subcat.spec.cout, K);
  SUBCNN_CHECK(num_classes >= 1, "rpn params: num_classes unset");
  const int F = subcat.spec.kh;
  const int flat = F * F * feature_channels;
  SUBCNN_CHECK(bbox_w.rank() == 2 && bbox_w.dim(0) == flat &&
                   bbox_w.dim(1) == 4 * (num_classes + 1),
               "rpn params: bbox weight must be (%d, %d)", flat, 4 * (num_classes + 1));
  SUBCNN_CHECK(bbox_b.rank() == 1 && bbox_b.dim(0) == 4 * (num_classes + 1),
               "rpn params: bbox bias must be (%d)", 4 * (num_classes + 1));
}

template <typename T>
RpnForwardT<T> rpn_forward_loss(GraphT<T>& g, const std::vector<Roi>& rois,
                                const std::vector<LevelGeom>& geoms, int stride,
                                const RpnRefs& refs, const SubcategoryTable& table,
                                T lambda) {
  SUBCNN_CHECK(!rois.empty(), "rpn loss: empty roi batch");
  SUBCNN_CHECK(refs.subcat_w >= 0 && refs.subcat_b >= 0 && refs.bbox_w >= 0 &&
                   refs.bbox_b >= 0,
               "rpn loss: parameter refs unset");
  const TensorT<T>& w = g.value(refs.subcat_w);
  SUBCNN_CHECK(w.rank() == 4, "rpn loss: subcategory weight must be (F,F,C,K+1)");
  const int F = w.dim(0);
  const int C = w.dim(2);
  const int channels = w.dim(3);
  SUBCNN_CHECK(channels == table.K() + 1, "rpn loss: %d channels for K=%d", channels,
               table.K());
  const int num_classes = table.num_classes();
  SUBCNN_CHECK(g.value(refs.bbox_w).dim(1) == 4 * (num_classes + 1),
               "rpn loss: bbox head width mismatch");

  const int R = static_cast<int>(rois.size());
  std::vector<std::vector<int>> by_level(geoms.size());
  for (int i = 0; i < R; ++i) {
    const Roi& roi = rois[static_cast<size_t>(i)];
    SUBCNN_CHECK(roi.scale_index >= 0 &&
                     roi.scale_index < static_cast<int>(geoms.size()),
                 "rpn loss: roi scale index %d out of range", roi.scale_index);
    SUBCNN_CHECK(roi.label_class >= 0 && roi.label_class <= num_classes,
                 "rpn loss: class label %d out of range", roi.label_class);
    SUBCNN_CHECK(roi.label_subcategory >= 0 && roi.label_subcategory <= table.K(),
                 "rpn loss: subcategory label %d out of range", roi.label_subcategory);
    if (roi.label_class == 0) {
      SUBCNN_CHECK(roi.label_subcategory == 0,
                   "rpn loss: background roi carries subcategory %d",
                   roi.label_subcategory);
    } else {
      SUBCNN_CHECK(roi.label_subcategory >= 1,
                   "rpn loss: positive roi with background subcategory");
      SUBCNN_CHECK(table.class_of(roi.label_subcategory) == roi.label_class,
                   "rpn loss: subcategory %d does not belong to class %d",
                   roi.label_subcategory, roi.label_class);
    }
    by_level[static_cast<size_t>(roi.scale_index)].push_back(i);
  }

  const typename GraphT<T>::Ref w2d = g.reshape(refs.subcat_w, {F * F * C, channels});

  RpnForwardT<T> fwd;
  fwd.logits = TensorT<T>::zeros({R, channels});
  fwd.deltas = TensorT<T>::zeros({R, 4});
  typename GraphT<T>::Ref subcls_total = -1, loc_total = -1;
  for (size_t l = 0; l < by_level.size(); ++l) {
    const std::vector<int>& idx = by_level[l];
    if (idx.empty()) continue;
    SUBCNN_CHECK(l < refs.level_features.size() && refs.level_features[l] >= 0,
                 "rpn loss: no features supplied for level %zu", l);
    const typename GraphT<T>::Ref feat = refs.level_features[l];
    SUBCNN_CHECK(g.value(feat).rank() == 3 && g.value(feat).dim(2) == C,
                 "rpn loss: level %zu features mismatch filters", l);

    const double f = geoms[l].scale / stride;
    std::vector<RoiWindow> windows;
    std::vector<int> labels;
    std::vector<int> col_start;
    std::vector<T> row_weight;
    TensorT<T> targets = TensorT<T>::zeros({static_cast<int>(idx.size()), 4});
    for (size_t k = 0; k < idx.size(); ++k) {
      const Roi& roi = rois[static_cast<size_t>(idx[k])];
      windows.push_back(RoiWindow{roi.box.x1 * f, roi.box.y1 * f, roi.box.x2 * f,
                                  roi.box.y2 * f});
      labels.push_back(roi.label_subcategory);
      col_start.push_back(4 * roi.label_class);
      const bool positive = roi.label_class >= 1;
      row_weight.push_back(positive ? lambda / static_cast<T>(R) : T(0));
      if (positive) {
        targets.at(static_cast<int>(k), 0) = static_cast<T>(roi.target.tx);
        targets.at(static_cast<int>(k), 1) = static_cast<T>(roi.target.ty);
        targets.at(static_cast<int>(k), 2) = static_cast<T>(roi.target.tw);
        targets.at(static_cast<int>(k), 3) = static_cast<T>(roi.target.th);
      }
    }

    auto pooled = roi_pool(g, feat, windows, F, F);
    auto flat = g.reshape(pooled, {static_cast<int>(idx.size()), F * F * C});
    auto logits = fc(g, flat, w2d, refs.subcat_b);
    auto deltas_all = fc(g, flat, refs.bbox_w, refs.bbox_b);
    auto deltas = gather_cols(g, deltas_all, col_start, 4);

    const T frac = static_cast<T>(idx.size()) / static_cast<T>(R);
    auto subcls = g.scale(softmax_xent(g, logits, labels), frac);
    auto loc = smooth_l1(g, deltas, targets, row_weight);
    subcls_total = subcls_total < 0 ? subcls : g.add(subcls_total, subcls);
    loc_total = loc_total < 0 ? loc : g.add(loc_total, loc);

    const TensorT<T>& lv = g.value(logits);
    const TensorT<T>& dv = g.value(deltas);
    for (size_t k = 0; k < idx.size(); ++k) {
      for (int j = 0; j < channels; ++j) {
        fwd.logits.at(idx[k], j) = lv.at(static_cast<int>(k), j);
      }
      for (int j = 0; j < 4; ++j) {
        fwd.deltas.at(idx[k], j) = dv.at(static_cast<int>(k), j);
      }
    }
  }

  fwd.loss = g.add(subcls_total, loc_total);
  fwd.subcls = g.value(subcls_total).at(0);
  fwd.loc = g.value(loc_total).at(0);
  return fwd;
}

std::string proposals_to_csv(const std::vector<std::vector<Roi>>& per_image) {
  std::string out = "image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax\n";
  char buf[256];
  for (size_t i = 0; i < per_image.size(); ++i) {
    for (const Roi& r : per_image[i]) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n", i,
                    r.box.x1, r.box.y1, r.box.x2, r.box.y2, r.score, r.scale_index,
                    r.subcategory_argmax);
      out += buf;
    }
  }
  return out;
}

std::vector<std::vector<Roi>> proposals_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  SUBCNN_CHECK(static_cast<bool>(std::getline(in, line)), "proposal csv: empty");
  SUBCNN_CHECK(line == "image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax",
               "proposal csv: unexpected header '%s'", line.c_str());
  std::vector<std::vector<Roi>> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    double v[8];
    int n = 0;
    const char* p = line.c_str();
    char* end = nullptr;
    for (; n < 8; ++n) {
      v[n] = std::strtod(p, &end);
      SUBCNN_CHECK(end != p, "proposal csv: bad field %d on line %d", n + 1, line_no);
      p = end;
      if (n < 7) {
        SUBCNN_CHECK(*p == ',', "proposal csv: expected comma on line %d", line_no);
        ++p;
      }
    }
    SUBCNN_CHECK(*p == '\0' || *p == '\r', "proposal csv: trailing junk on line %d",
                 line_no);
    const int image_id = static_cast<int>(v[0]);
    SUBCNN_CHECK(image_id >= 0, "proposal csv: negative image id on line %d", line_no);
    if (static_cast<size_t>(image_id) >= out.size()) {
      out.resize(static_cast<size_t>(image_id) + 1);
    }
    Roi r;
    r.box = Box{v[1], v[2], v[3], v[4]};
    r.score = v[5];
    r.scale_index = static_cast<int>(v[6]);
    r.subcategory_argmax = static_cast<int>(v[7]);
    out[static_cast<size_t>(image_id)].push_back(r);
  }
  return out;
}

#define SUBCNN_INSTANTIATE_RPN(T)                                                       \
  template HeatMapStackT<T> subcategory_conv<T>(const FeaturePyramidT<T>&,              \
                                                const ConvParamsT<T>&);                 \
  template double percentile_threshold<T>(const HeatMapStackT<T>&, int);                \
  template std::vector<Roi> generate_rois_test<T>(const HeatMapStackT<T>&, double,      \
                                                  const std::vector<double>&, int);     \
  template std::vector<Roi> generate_rois_train<T>(const HeatMapStackT<T>&,             \
                                                   const std::vector<Annotation>&, int, \
                                                   double, double, double);             \
  template struct RpnParamsT<T>;                                                        \
  template RpnForwardT<T> rpn_forward_loss<T>(GraphT<T>&, const std::vector<Roi>&,      \
                                              const std::vector<LevelGeom>&, int,       \
                                              const RpnRefs&, const SubcategoryTable&,  \
                                              T);

SUBCNN_INSTANTIATE_RPN(float)
SUBCNN_INSTANTIATE_RPN(double)

}  // namespace subcnn
