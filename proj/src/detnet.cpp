#include "subcnn/detnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "subcnn/geometry.hpp"
#include "subcnn/layers.hpp"

namespace subcnn {

template <typename T>
void DetParamsT<T>::validate(int feature_channels, const SubcategoryTable& table) const {
  SUBCNN_CHECK(grid >= 1, "det params: grid must be >= 1");
  SUBCNN_CHECK(feature_channels >= 1, "det params: feature channels unset");
  table.validate();
  const int flat = grid * grid * feature_channels;
  const int K = table.K();
  const int num_classes = table.num_classes();
  SUBCNN_CHECK(fc1_w.rank() == 2 && fc1_w.dim(0) == flat,
               "det params: fc1 weight must be (%d, hidden)", flat);
  const int hidden = fc1_w.dim(1);
  SUBCNN_CHECK(hidden >= 1, "det params: hidden width must be >= 1");
  SUBCNN_CHECK(fc1_b.rank() == 1 && fc1_b.dim(0) == hidden,
               "det params: fc1 bias must be (%d)", hidden);
  SUBCNN_CHECK(fc2_w.rank() == 2 && fc2_w.dim(0) == hidden && fc2_w.dim(1) == hidden,
               "det params: fc2 weight must be (%d, %d)", hidden, hidden);
  SUBCNN_CHECK(fc2_b.rank() == 1 && fc2_b.dim(0) == hidden,
               "det params: fc2 bias must be (%d)", hidden);
  SUBCNN_CHECK(subcat_w.rank() == 2 && subcat_w.dim(0) == hidden &&
                   subcat_w.dim(1) == K + 1,
               "det params: subcategory weight must be (%d, %d)", hidden, K + 1);
  SUBCNN_CHECK(subcat_b.rank() == 1 && subcat_b.dim(0) == K + 1,
               "det params: subcategory bias must be (%d)", K + 1);
  SUBCNN_CHECK(cls_w.rank() == 2 && cls_w.dim(0) == K + 1 &&
                   cls_w.dim(1) == num_classes + 1,
               "det params: class weight must be (%d, %d)", K + 1, num_classes + 1);
  SUBCNN_CHECK(cls_b.rank() == 1 && cls_b.dim(0) == num_classes + 1,
               "det params: class bias must be (%d)", num_classes + 1);
  SUBCNN_CHECK(box_w.rank() == 2 && box_w.dim(0) == K + 1 &&
                   box_w.dim(1) == 4 * (num_classes + 1),
               "det params: box weight must be (%d, %d)", K + 1, 4 * (num_classes + 1));
  SUBCNN_CHECK(box_b.rank() == 1 && box_b.dim(0) == 4 * (num_classes + 1),
               "det params: box bias must be (%d)", 4 * (num_classes + 1));
}

int assign_scale(const Box& roi, const std::vector<double>& scales, double target_px) {
  SUBCNN_CHECK(!scales.empty(), "assign scale: no scales");
  SUBCNN_CHECK(target_px > 0, "assign scale: target extent must be positive");
  const double side = std::sqrt(roi.area());
  SUBCNN_CHECK(side > 0, "assign scale: degenerate roi");
  int best = 0;
  double best_obj = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < scales.size(); ++i) {
    SUBCNN_CHECK(scales[i] > 0, "assign scale: scale %zu not positive", i);
    const double obj = std::fabs(std::log(side * scales[i] / target_px));
    if (obj < best_obj) {
      best_obj = obj;
      best = static_cast<int>(i);
    }
  }
  return best;
}

template <typename T>
DetForwardT<T> det_forward_loss(GraphT<T>& g, const std::vector<Roi>& rois,
                                const std::vector<LevelGeom>& geoms, int stride,
                                const DetRefs& refs, const SubcategoryTable& table,
                                int grid, T lambda1, T lambda2) {
  SUBCNN_CHECK(!rois.empty(), "det loss: empty roi batch");
  SUBCNN_CHECK(grid >= 1, "det loss: grid must be >= 1");
  SUBCNN_CHECK(refs.fc1_w >= 0 && refs.fc1_b >= 0 && refs.fc2_w >= 0 && refs.fc2_b >= 0 &&
                   refs.subcat_w >= 0 && refs.subcat_b >= 0 && refs.cls_w >= 0 &&
                   refs.cls_b >= 0 && refs.box_w >= 0 && refs.box_b >= 0,
               "det loss: parameter refs unset");
  const TensorT<T>& w1 = g.value(refs.fc1_w);
  SUBCNN_CHECK(w1.rank() == 2 && w1.dim(0) % (grid * grid) == 0,
               "det loss: fc1 weight incompatible with grid %d", grid);
  const int C = w1.dim(0) / (grid * grid);
  const int K = table.K();
  const int num_classes = table.num_classes();
  SUBCNN_CHECK(g.value(refs.subcat_w).dim(1) == K + 1,
               "det loss: subcategory head width mismatch");
  SUBCNN_CHECK(g.value(refs.cls_w).dim(1) == num_classes + 1,
               "det loss: class head width mismatch");
  SUBCNN_CHECK(g.value(refs.box_w).dim(1) == 4 * (num_classes + 1),
               "det loss: box head width mismatch");

  const int R = static_cast<int>(rois.size());
  std::vector<std::vector<int>> by_level(geoms.size());
  for (int i = 0; i < R; ++i) {
    const Roi& roi = rois[static_cast<size_t>(i)];
    SUBCNN_CHECK(roi.scale_index >= 0 &&
                     roi.scale_index < static_cast<int>(geoms.size()),
                 "det loss: roi scale index %d out of range", roi.scale_index);
    SUBCNN_CHECK(roi.label_class >= 0 && roi.label_class <= num_classes,
                 "det loss: class label %d out of range", roi.label_class);
    SUBCNN_CHECK(roi.label_subcategory >= 0 && roi.label_subcategory <= K,
                 "det loss: subcategory label %d out of range", roi.label_subcategory);
    if (roi.label_class == 0) {
      SUBCNN_CHECK(roi.label_subcategory == 0,
                   "det loss: background roi carries subcategory %d",
                   roi.label_subcategory);
    } else {
      SUBCNN_CHECK(roi.label_subcategory >= 1,
                   "det loss: positive roi with background subcategory");
      SUBCNN_CHECK(table.class_of(roi.label_subcategory) == roi.label_class,
                   "det loss: subcategory %d does not belong to class %d",
                   roi.label_subcategory, roi.label_class);
    }
    by_level[static_cast<size_t>(roi.scale_index)].push_back(i);
  }

  DetForwardT<T> fwd;
  fwd.subcat_logits = TensorT<T>::zeros({R, K + 1});
  fwd.class_logits = TensorT<T>::zeros({R, num_classes + 1});
  fwd.deltas = TensorT<T>::zeros({R, 4});
  typename GraphT<T>::Ref subcls_total = -1, cls_total = -1, loc_total = -1;
  for (size_t l = 0; l < by_level.size(); ++l) {
    const std::vector<int>& idx = by_level[l];
    if (idx.empty()) continue;
    SUBCNN_CHECK(l < refs.level_features.size() && refs.level_features[l] >= 0,
                 "det loss: no features supplied for level %zu", l);
    const typename GraphT<T>::Ref feat = refs.level_features[l];
    SUBCNN_CHECK(g.value(feat).rank() == 3 && g.value(feat).dim(2) == C,
                 "det loss: level %zu features mismatch trunk input", l);

    const double f = geoms[l].scale / stride;
    std::vector<RoiWindow> windows;
    std::vector<int> subcat_labels;
    std::vector<int> class_labels;
    std::vector<int> col_start;
    std::vector<T> row_weight;
    TensorT<T> targets = TensorT<T>::zeros({static_cast<int>(idx.size()), 4});
    for (size_t k = 0; k < idx.size(); ++k) {
      const Roi& roi = rois[static_cast<size_t>(idx[k])];
      windows.push_back(RoiWindow{roi.box.x1 * f, roi.box.y1 * f, roi.box.x2 * f,
                                  roi.box.y2 * f});
      subcat_labels.push_back(roi.label_subcategory);
      class_labels.push_back(roi.label_class);
      col_start.push_back(4 * roi.label_class);
      const bool positive = roi.label_class >= 1;
      row_weight.push_back(positive ? T(1) / static_cast<T>(R) : T(0));
      if (positive) {
        targets.at(static_cast<int>(k), 0) = static_cast<T>(roi.target.tx);
        targets.at(static_cast<int>(k), 1) = static_cast<T>(roi.target.ty);
        targets.at(static_cast<int>(k), 2) = static_cast<T>(roi.target.tw);
        targets.at(static_cast<int>(k), 3) = static_cast<T>(roi.target.th);
      }
    }

    auto pooled = roi_pool(g, feat, windows, grid, grid);
    auto flat = g.reshape(pooled, {static_cast<int>(idx.size()), grid * grid * C});
    auto h1 = g.relu(fc(g, flat, refs.fc1_w, refs.fc1_b));
    auto h2 = g.relu(fc(g, h1, refs.fc2_w, refs.fc2_b));
    auto subcat_logits = fc(g, h2, refs.subcat_w, refs.subcat_b);
    auto class_logits = fc(g, subcat_logits, refs.cls_w, refs.cls_b);
    auto deltas_all = fc(g, subcat_logits, refs.box_w, refs.box_b);
    auto deltas = gather_cols(g, deltas_all, col_start, 4);

    const T frac = static_cast<T>(idx.size()) / static_cast<T>(R);
    auto subcls = g.scale(softmax_xent(g, subcat_logits, subcat_labels), frac);
    auto cls = g.scale(softmax_xent(g, class_logits, class_labels), frac);
    auto loc = smooth_l1(g, deltas, targets, row_weight);
    subcls_total = subcls_total < 0 ? subcls : g.add(subcls_total, subcls);
    cls_total = cls_total < 0 ? cls : g.add(cls_total, cls);
    loc_total = loc_total < 0 ? loc : g.add(loc_total, loc);

    const TensorT<T>& sv = g.value(subcat_logits);
    const TensorT<T>& cv = g.value(class_logits);
    const TensorT<T>& dv = g.value(deltas);
    for (size_t k = 0; k < idx.size(); ++k) {
      for (int j = 0; j <= K; ++j) {
        fwd.subcat_logits.at(idx[k], j) = sv.at(static_cast<int>(k), j);
      }
      for (int j = 0; j <= num_classes; ++j) {
        fwd.class_logits.at(idx[k], j) = cv.at(static_cast<int>(k), j);
      }
      for (int j = 0; j < 4; ++j) {
        fwd.deltas.at(idx[k], j) = dv.at(static_cast<int>(k), j);
      }
    }
  }

  fwd.loss = g.add(g.add(subcls_total, g.scale(cls_total, lambda1)),
                   g.scale(loc_total, lambda2));
  fwd.subcls = g.value(subcls_total).at(0);
  fwd.cls = g.value(cls_total).at(0);
  fwd.loc = g.value(loc_total).at(0);
  return fwd;
}

namespace {

// In-place relu on a plain tensor, matching the tape op's elementwise rule.
template <typename T>
void relu_inplace(TensorT<T>& t) {
  for (auto& v : t.data) v = std::max(v, T(0));
}

}  // namespace

template <typename T>
std::vector<DetOutput> det_infer(const FeaturePyramidT<T>& pyramid,
                                 const std::vector<Roi>& rois,
                                 const DetParamsT<T>& params,
                                 const SubcategoryTable& table) {
  params.validate(pyramid.channels, table);
  SUBCNN_CHECK(!pyramid.levels.empty(), "det infer: empty pyramid");
  const int G = params.grid;
  const int C = pyramid.channels;
  const int K = table.K();
  const int num_classes = table.num_classes();

  const int R = static_cast<int>(rois.size());
  std::vector<std::vector<int>> by_level(pyramid.levels.size());
  for (int i = 0; i < R; ++i) {
    const Roi& roi = rois[static_cast<size_t>(i)];
    SUBCNN_CHECK(roi.scale_index >= 0 &&
                     roi.scale_index < static_cast<int>(pyramid.levels.size()),
                 "det infer: roi scale index %d out of range", roi.scale_index);
    by_level[static_cast<size_t>(roi.scale_index)].push_back(i);
  }

  std::vector<DetOutput> out(static_cast<size_t>(R));
  for (size_t l = 0; l < by_level.size(); ++l) {
    const std::vector<int>& idx = by_level[l];
    if (idx.empty()) continue;
    const PyramidLevelT<T>& level = pyramid.levels[l];
    TensorT<T> feat = crop_valid(level.features, level.geom.feat_h, level.geom.feat_w);

    const double f = level.geom.scale / pyramid.stride;
    std::vector<RoiWindow> windows;
    for (int i : idx) {
      const Box& b = rois[static_cast<size_t>(i)].box;
      windows.push_back(RoiWindow{b.x1 * f, b.y1 * f, b.x2 * f, b.y2 * f});
    }

    TensorT<T> flat = roi_pool(feat, windows, G, G);
    flat.shape = {static_cast<int>(idx.size()), G * G * C};
    TensorT<T> h1 = fc(flat, params.fc1_w, params.fc1_b);
    relu_inplace(h1);
    TensorT<T> h2 = fc(h1, params.fc2_w, params.fc2_b);
    relu_inplace(h2);
    TensorT<T> subcat_logits = fc(h2, params.subcat_w, params.subcat_b);
    TensorT<T> class_logits = fc(subcat_logits, params.cls_w, params.cls_b);
    TensorT<T> deltas_all = fc(subcat_logits, params.box_w, params.box_b);

    for (size_t k = 0; k < idx.size(); ++k) {
      DetOutput& o = out[static_cast<size_t>(idx[k])];
      o.subcat_probs.resize(static_cast<size_t>(K + 1));
      for (int j = 0; j <= K; ++j) {
        o.subcat_probs[static_cast<size_t>(j)] =
            static_cast<double>(subcat_logits.at(static_cast<int>(k), j));
      }
      softmax_inplace(o.subcat_probs.data(), K + 1);
      o.class_probs.resize(static_cast<size_t>(num_classes + 1));
      for (int j = 0; j <= num_classes; ++j) {
        o.class_probs[static_cast<size_t>(j)] =
            static_cast<double>(class_logits.at(static_cast<int>(k), j));
      }
      softmax_inplace(o.class_probs.data(), num_classes + 1);
      o.deltas.resize(static_cast<size_t>(num_classes + 1));
      for (int c = 0; c <= num_classes; ++c) {
        BoxDelta d;
        d.tx = static_cast<double>(deltas_all.at(static_cast<int>(k), 4 * c + 0));
        d.ty = static_cast<double>(deltas_all.at(static_cast<int>(k), 4 * c + 1));
        d.tw = static_cast<double>(deltas_all.at(static_cast<int>(k), 4 * c + 2));
        d.th = static_cast<double>(deltas_all.at(static_cast<int>(k), 4 * c + 3));
        o.deltas[static_cast<size_t>(c)] = d;
      }
    }
  }
  return out;
}

void DetectConfig::validate() const {
  SUBCNN_CHECK(!aspect_ratios.empty(), "detect config: no aspect ratios");
  for (double a : aspect_ratios) {
    SUBCNN_CHECK(a > 0, "detect config: aspect ratio must be positive");
  }
  SUBCNN_CHECK(heat_keep >= 1, "detect config: heat_keep must be >= 1");
  SUBCNN_CHECK(proposal_budget >= 1, "detect config: proposal budget must be >= 1");
  SUBCNN_CHECK(proposal_nms_iou >= 0 && proposal_nms_iou <= 1,
               "detect config: proposal nms iou out of [0,1]");
  SUBCNN_CHECK(nms_iou >= 0 && nms_iou <= 1, "detect config: nms iou out of [0,1]");
  SUBCNN_CHECK(score_thresh >= 0 && score_thresh <= 1,
               "detect config: score threshold out of [0,1]");
  SUBCNN_CHECK(image_id >= 0, "detect config: negative image id");
}

std::vector<Detection> detect(const Tensor& image, const Backbone& backbone,
                              const ScaleSet& scales, const ConvParams& proposal_filters,
                              const DetParams& params, const SubcategoryTable& table,
                              const DetectConfig& cfg) {
  cfg.validate();
  table.validate();
  SUBCNN_CHECK(proposal_filters.spec.cout == table.K() + 1,
               "detect: proposal filters carry %d channels for K=%d",
               proposal_filters.spec.cout, table.K());

  FeaturePyramid pyramid = build_feature_pyramid(image, backbone, scales);
  params.validate(pyramid.channels, table);

  HeatMapStackT<float> heat = subcategory_conv(pyramid, proposal_filters);
  const double threshold = percentile_threshold(heat, cfg.heat_keep);
  std::vector<Roi> rois =
      generate_rois_test(heat, threshold, cfg.aspect_ratios, cfg.heat_keep);
  std::vector<Roi> proposals = select_proposals(rois, cfg.proposal_nms_iou,
                                                cfg.proposal_budget);

  // Re-home every proposal on the level whose resolution best matches the
  // pooling grid; the move can shrink a box below one feature cell there,
  // and such boxes are dropped.
  std::vector<double> level_scales;
  level_scales.reserve(pyramid.levels.size());
  for (const auto& level : pyramid.levels) level_scales.push_back(level.geom.scale);
  const double target_px = static_cast<double>(params.grid) * pyramid.stride;
  std::vector<Roi> kept;
  for (Roi r : proposals) {
    const int si = assign_scale(r.box, level_scales, target_px);
    const LevelGeom& gm = pyramid.levels[static_cast<size_t>(si)].geom;
    if (!roi_snaps_nonempty(r.box, gm.scale, pyramid.stride, gm.feat_h, gm.feat_w)) {
      continue;
    }
    r.scale_index = si;
    kept.push_back(r);
  }
  if (kept.empty()) return {};

  std::vector<DetOutput> outputs = det_infer(pyramid, kept, params, table);

  std::vector<Detection> all;
  for (int c = 1; c <= table.num_classes(); ++c) {
    const std::vector<int> ids = table.ids_of_class(c);
    std::vector<Detection> cls_dets;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (size_t i = 0; i < kept.size(); ++i) {
      const DetOutput& o = outputs[i];
      const double score = o.class_probs[static_cast<size_t>(c)];
      if (!(score > cfg.score_thresh)) continue;
      const Box box = clip_box(decode_box(kept[i].box, o.deltas[static_cast<size_t>(c)]),
                               pyramid.orig_w, pyramid.orig_h);
      if (!box.valid()) continue;
      int best_id = ids.front();
      double best_p = -1.0;
      for (int id : ids) {
        const double p = o.subcat_probs[static_cast<size_t>(id)];
        if (p > best_p) {
          best_p = p;
          best_id = id;
        }
      }
      Detection d;
      d.image_id = cfg.image_id;
      d.class_id = c;
      d.box = box;
      d.score = score;
      d.subcategory = best_id;
      d.theta = transfer_orientation(table, best_id);
      cls_dets.push_back(d);
      boxes.push_back(box);
      scores.push_back(score);
    }
    for (int k : nms(boxes, scores, cfg.nms_iou)) {
      all.push_back(cls_dets[static_cast<size_t>(k)]);
    }
  }

  std::sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    return a.box.y2 < b.box.y2;
  });
  return all;
}

std::string detections_to_csv(const std::vector<Detection>& dets) {
  std::string out = "image_id,class,score,x1,y1,x2,y2,subcategory_id,orientation_rad\n";
  char buf[320];
  for (const Detection& d : dets) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g\n",
                  d.image_id, d.class_id, d.score, d.box.x1, d.box.y1, d.box.x2,
                  d.box.y2, d.subcategory, d.theta);
    out += buf;
  }
  return out;
}

std::vector<Detection> detections_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  SUBCNN_CHECK(static_cast<bool>(std::getline(in, line)), "detection csv: empty");
  SUBCNN_CHECK(line == "image_id,class,score,x1,y1,x2,y2,subcategory_id,orientation_rad",
               "detection csv: unexpected header '%s'", line.c_str());
  std::vector<Detection> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    double v[9];
    int n = 0;
    const char* p = line.c_str();
    char* end = nullptr;
    for (; n < 9; ++n) {
      v[n] = std::strtod(p, &end);
      SUBCNN_CHECK(end != p, "detection csv: bad field %d on line %d", n + 1, line_no);
      p = end;
      if (n < 8) {
        SUBCNN_CHECK(*p == ',', "detection csv: expected comma on line %d", line_no);
        ++p;
      }
    }
    SUBCNN_CHECK(*p == '\0' || *p == '\r', "detection csv: trailing junk on line %d",
                 line_no);
    Detection d;
    d.image_id = static_cast<int>(v[0]);
    SUBCNN_CHECK(d.image_id >= 0, "detection csv: negative image id on line %d", line_no);
    d.class_id = static_cast<int>(v[1]);
    d.score = v[2];
    d.box = Box{v[3], v[4], v[5], v[6]};
    d.subcategory = static_cast<int>(v[7]);
    d.theta = v[8];
    out.push_back(d);
  }
  return out;
}

#define SUBCNN_INSTANTIATE_DETNET(T)                                                     \
  template void DetParamsT<T>::validate(int, const SubcategoryTable&) const;            \
  template DetForwardT<T> det_forward_loss<T>(GraphT<T>&, const std::vector<Roi>&,      \
                                              const std::vector<LevelGeom>&, int,       \
                                              const DetRefs&, const SubcategoryTable&,  \
                                              int, T, T);                                \
  template std::vector<DetOutput> det_infer<T>(const FeaturePyramidT<T>&,               \
                                               const std::vector<Roi>&,                 \
                                               const DetParamsT<T>&,                    \
                                               const SubcategoryTable&);

SUBCNN_INSTANTIATE_DETNET(float)
SUBCNN_INSTANTIATE_DETNET(double)

#undef SUBCNN_INSTANTIATE_DETNET

}  // namespace subcnn
