#include "subcnn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "subcnn/geometry.hpp"
#include "subcnn/layers.hpp"

namespace subcnn {

void TrainConfig::validate() const {
  SUBCNN_CHECK(learning_rate >= 0, "train config: negative learning rate");
  SUBCNN_CHECK(momentum >= 0 && momentum < 1, "train config: momentum out of [0,1)");
  SUBCNN_CHECK(weight_decay >= 0, "train config: negative weight decay");
  SUBCNN_CHECK(iterations >= 1, "train config: iterations must be >= 1");
  SUBCNN_CHECK(lambda >= 0 && lambda1 >= 0 && lambda2 >= 0,
               "train config: negative loss weight");
  SUBCNN_CHECK(rpn_rois >= 1, "train config: rpn batch size must be >= 1");
  SUBCNN_CHECK(rpn_positive_fraction >= 0 && rpn_positive_fraction <= 1,
               "train config: rpn positive fraction out of [0,1]");
  SUBCNN_CHECK(rpn_iou_neg >= 0 && rpn_iou_neg < rpn_iou_pos && rpn_iou_pos <= 1,
               "train config: need 0 <= iou_neg < iou_pos <= 1");
  SUBCNN_CHECK(det_images >= 1, "train config: det images must be >= 1");
  SUBCNN_CHECK(det_rois >= 1, "train config: det batch size must be >= 1");
  SUBCNN_CHECK(det_positive_fraction >= 0 && det_positive_fraction <= 1,
               "train config: det positive fraction out of [0,1]");
  SUBCNN_CHECK(det_iou_pos > 0 && det_iou_pos <= 1,
               "train config: det iou_pos out of (0,1]");
  SUBCNN_CHECK(log_every >= 1, "train config: log_every must be >= 1");
}

namespace {

template <typename T>
void fill_fan_in(TensorT<T>& w, int fan_in, Rng& rng) {
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w.data) v = static_cast<T>(rng.gaussian(0.0, sigma));
}

void validate_dataset(const std::vector<TrainSample>& dataset,
                      const SubcategoryTable& table, int in_channels) {
  for (size_t i = 0; i < dataset.size(); ++i) {
    SUBCNN_CHECK(dataset[i].image.rank() == 3 && dataset[i].image.dim(2) == in_channels,
                 "dataset: image %zu is not (H,W,%d)", i, in_channels);
    for (const Annotation& a : dataset[i].annotations) {
      if (a.ignore) continue;
      SUBCNN_CHECK(a.class_id >= 1 && a.class_id <= table.num_classes(),
                   "dataset: image %zu carries class %d outside the table", i,
                   a.class_id);
      SUBCNN_CHECK(a.subcategory >= 1 && a.subcategory <= table.K() &&
                       table.class_of(a.subcategory) == a.class_id,
                   "dataset: image %zu annotation lacks a subcategory consistent "
                   "with its class (run subcategory assignment first)",
                   i);
      SUBCNN_CHECK(a.box.valid(), "dataset: image %zu has a degenerate box", i);
    }
  }
}

template <typename T>
std::vector<TensorT<T>*> rpn_param_list(RpnModelT<T>& m) {
  return {&m.backbone.conv1.weight, &m.backbone.conv1.bias,
          &m.backbone.conv2.weight, &m.backbone.conv2.bias,
          &m.params.subcat.weight,  &m.params.subcat.bias,
          &m.params.bbox_w,         &m.params.bbox_b};
}

template <typename T>
std::vector<TensorT<T>*> det_param_list(DetParamsT<T>& p) {
  return {&p.fc1_w, &p.fc1_b,    &p.fc2_w,    &p.fc2_b,  &p.subcat_w,
          &p.subcat_b, &p.cls_w, &p.cls_b, &p.box_w, &p.box_b};
}

}  // namespace

template <typename T>
RpnModelT<T> init_rpn_model(int in_channels, int c1, int c2, int filter_size,
                            const SubcategoryTable& table, uint64_t seed) {
  SUBCNN_CHECK(in_channels >= 1 && c1 >= 1 && c2 >= 1, "init: bad channel counts");
  SUBCNN_CHECK(filter_size >= 1 && filter_size % 2 == 1,
               "init: filter size must be odd");
  table.validate();
  const int K = table.K();

  RpnModelT<T> m;
  m.backbone.conv1.spec = {3, 3, in_channels, c1, 1, 1};
  m.backbone.conv1.weight = TensorT<T>::zeros({3, 3, in_channels, c1});
  m.backbone.conv1.bias = TensorT<T>::zeros({c1});
  m.backbone.conv2.spec = {3, 3, c1, c2, 1, 1};
  m.backbone.conv2.weight = TensorT<T>::zeros({3, 3, c1, c2});
  m.backbone.conv2.bias = TensorT<T>::zeros({c2});
  m.params.subcat.spec = {filter_size, filter_size, c2, K + 1, 1, filter_size / 2};
  m.params.subcat.weight = TensorT<T>::zeros({filter_size, filter_size, c2, K + 1});
  m.params.subcat.bias = TensorT<T>::zeros({K + 1});
  const int flat = filter_size * filter_size * c2;
  m.params.bbox_w = TensorT<T>::zeros({flat, 4 * (table.num_classes() + 1)});
  m.params.bbox_b = TensorT<T>::zeros({4 * (table.num_classes() + 1)});
  m.params.num_classes = table.num_classes();

  Rng rng(seed);
  fill_fan_in(m.backbone.conv1.weight, 3 * 3 * in_channels, rng);
  fill_fan_in(m.backbone.conv2.weight, 3 * 3 * c1, rng);
  fill_fan_in(m.params.subcat.weight, flat, rng);
  fill_fan_in(m.params.bbox_w, flat, rng);
  // Foreground bias -log(K): one unit of prior mass per subcategory against
  // background's one, so the initial softmax sits near half background.
  const T fg = static_cast<T>(-std::log(static_cast<double>(K)));
  for (int k = 1; k <= K; ++k) m.params.subcat.bias.at(k) = fg;
  return m;
}

template <typename T>
DetParamsT<T> init_det_params(int channels, int grid, int hidden,
                              const SubcategoryTable& table, uint64_t seed) {
  SUBCNN_CHECK(channels >= 1 && grid >= 1 && hidden >= 1, "init: bad head extents");
  table.validate();
  const int K = table.K();
  const int num_classes = table.num_classes();

  DetParamsT<T> p;
  p.grid = grid;
  const int flat = grid * grid * channels;
  p.fc1_w = TensorT<T>::zeros({flat, hidden});
  p.fc1_b = TensorT<T>::zeros({hidden});
  p.fc2_w = TensorT<T>::zeros({hidden, hidden});
  p.fc2_b = TensorT<T>::zeros({hidden});
  p.subcat_w = TensorT<T>::zeros({hidden, K + 1});
  p.subcat_b = TensorT<T>::zeros({K + 1});
  p.cls_w = TensorT<T>::zeros({K + 1, num_classes + 1});
  p.cls_b = TensorT<T>::zeros({num_classes + 1});
  p.box_w = TensorT<T>::zeros({K + 1, 4 * (num_classes + 1)});
  p.box_b = TensorT<T>::zeros({4 * (num_classes + 1)});

  Rng rng(seed);
  fill_fan_in(p.fc1_w, flat, rng);
  fill_fan_in(p.fc2_w, hidden, rng);
  fill_fan_in(p.subcat_w, hidden, rng);
  fill_fan_in(p.cls_w, K + 1, rng);
  fill_fan_in(p.box_w, K + 1, rng);
  return p;
}

void assign_subcategories(std::vector<Annotation>& annotations,
                          const SubcategoryTable& table) {
  for (Annotation& a : annotations) {
    if (a.ignore) continue;
    a.subcategory = orientation_subcategory_id(table, a.class_id, a.theta);
  }
}

std::string loss_log_to_csv(const std::vector<LossRow>& rows) {
  std::string out = "iteration,total,subcls,cls,loc\n";
  char buf[200];
  for (const LossRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                  r.total, r.subcls, r.cls, r.loc);
    out += buf;
  }
  return out;
}

std::vector<LossRow> loss_log_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  SUBCNN_CHECK(static_cast<bool>(std::getline(in, line)), "loss log csv: empty");
  SUBCNN_CHECK(line == "iteration,total,subcls,cls,loc",
               "loss log csv: unexpected header '%s'", line.c_str());
  std::vector<LossRow> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    double v[5];
    const char* p = line.c_str();
    char* end = nullptr;
    for (int n = 0; n < 5; ++n) {
      v[n] = std::strtod(p, &end);
      SUBCNN_CHECK(end != p, "loss log csv: bad field %d on line %d", n + 1, line_no);
      p = end;
      if (n < 4) {
        SUBCNN_CHECK(*p == ',', "loss log csv: expected comma on line %d", line_no);
        ++p;
      }
    }
    SUBCNN_CHECK(*p == '\0' || *p == '\r', "loss log csv: trailing junk on line %d",
                 line_no);
    out.push_back(LossRow{static_cast<int>(v[0]), v[1], v[2], v[3], v[4]});
  }
  return out;
}

template <typename T>
SgdT<T>::SgdT(std::vector<TensorT<T>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(static_cast<T>(cfg.learning_rate)),
      mu_(static_cast<T>(cfg.momentum)),
      wd_(static_cast<T>(cfg.weight_decay)) {
  cfg.validate();
  SUBCNN_CHECK(!params_.empty(), "sgd: no parameters");
  velocity_.reserve(params_.size());
  for (auto* p : params_) velocity_.push_back(TensorT<T>::zeros(p->shape));
}

template <typename T>
void SgdT<T>::step(const std::vector<const TensorT<T>*>& grads) {
  SUBCNN_CHECK(grads.size() == params_.size(), "sgd: grad/param count mismatch");
  for (size_t i = 0; i < params_.size(); ++i) {
    TensorT<T>& p = *params_[i];
    const TensorT<T>& g = *grads[i];
    TensorT<T>& v = velocity_[i];
    SUBCNN_CHECK(g.same_shape(p), "sgd: grad %zu shape mismatch", i);
    for (int64_t k = 0; k < p.numel(); ++k) {
      v.data[k] = mu_ * v.data[k] - lr_ * (g.data[k] + wd_ * p.data[k]);
      p.data[k] += v.data[k];
    }
  }
}

template <typename T>
std::vector<int> tape_pyramid_features(GraphT<T>& g, const TensorT<T>& image,
                                       const BackboneRefs& bb,
                                       const std::vector<LevelGeom>& geoms,
                                       const std::vector<bool>& needed) {
  SUBCNN_CHECK(needed.size() == geoms.size(), "feature tape: needed/geoms mismatch");
  const int n = static_cast<int>(geoms.size());
  std::vector<bool> run(static_cast<size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    if (!needed[static_cast<size_t>(i)]) continue;
    if (geoms[static_cast<size_t>(i)].is_computed) {
      run[static_cast<size_t>(i)] = true;
    } else {
      const int src = geoms[static_cast<size_t>(i)].src;
      SUBCNN_CHECK(src >= 0 && src < n && geoms[static_cast<size_t>(src)].is_computed,
                   "feature tape: level %d has no computed source", i);
      run[static_cast<size_t>(src)] = true;
    }
  }
  std::vector<int> refs(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    if (!run[static_cast<size_t>(i)]) continue;
    const LevelGeom& gm = geoms[static_cast<size_t>(i)];
    TensorT<T> img = bilinear_resize(image, gm.img_h, gm.img_w);
    refs[static_cast<size_t>(i)] = backbone_forward(g, g.input(std::move(img)), bb);
    SUBCNN_CHECK(g.value(refs[static_cast<size_t>(i)]).dim(0) == gm.feat_h &&
                     g.value(refs[static_cast<size_t>(i)]).dim(1) == gm.feat_w,
                 "feature tape: stride mismatch at level %d", i);
  }
  for (int i = 0; i < n; ++i) {
    const LevelGeom& gm = geoms[static_cast<size_t>(i)];
    if (!needed[static_cast<size_t>(i)] || gm.is_computed) continue;
    refs[static_cast<size_t>(i)] =
        g.bilinear_resize(refs[static_cast<size_t>(gm.src)], gm.feat_h, gm.feat_w);
  }
  return refs;
}

template <typename T>
RpnStepT<T> rpn_step_graph(GraphT<T>& g, const RpnModelT<T>& model,
                           const ScaleSet& scales, const SubcategoryTable& table,
                           const TensorT<T>& image,
                           const std::vector<Annotation>& gts, const TrainConfig& cfg) {
  FeaturePyramidT<T> pyr = build_feature_pyramid(image, model.backbone, scales);
  HeatMapStackT<T> heat = subcategory_conv(pyr, model.params.subcat);

  RpnStepT<T> step;
  step.batch = generate_rois_train(heat, gts, cfg.rpn_rois, cfg.rpn_positive_fraction,
                                   cfg.rpn_iou_pos, cfg.rpn_iou_neg);
  if (step.batch.empty()) return step;

  step.backbone.w1 = g.input(model.backbone.conv1.weight, true);
  step.backbone.b1 = g.input(model.backbone.conv1.bias, true);
  step.backbone.w2 = g.input(model.backbone.conv2.weight, true);
  step.backbone.b2 = g.input(model.backbone.conv2.bias, true);
  step.heads.subcat_w = g.input(model.params.subcat.weight, true);
  step.heads.subcat_b = g.input(model.params.subcat.bias, true);
  step.heads.bbox_w = g.input(model.params.bbox_w, true);
  step.heads.bbox_b = g.input(model.params.bbox_b, true);

  std::vector<LevelGeom> geoms;
  geoms.reserve(pyr.levels.size());
  for (const auto& level : pyr.levels) geoms.push_back(level.geom);
  std::vector<bool> needed(geoms.size(), false);
  for (const Roi& r : step.batch) needed[static_cast<size_t>(r.scale_index)] = true;
  step.heads.level_features = tape_pyramid_features(g, image, step.backbone, geoms,
                                                    needed);
  step.fwd = rpn_forward_loss(g, step.batch, geoms, pyr.stride, step.heads, table,
                              static_cast<T>(cfg.lambda));
  return step;
}

template <typename T>
RpnTrainResultT<T> train_rpn(const std::vector<TrainSample>& dataset,
                             const ScaleSet& scales, const SubcategoryTable& table,
                             const RpnModelT<T>& init, const TrainConfig& cfg) {
  cfg.validate();
  scales.validate();
  table.validate();
  SUBCNN_CHECK(!dataset.empty(), "train rpn: empty dataset");
  validate_dataset(dataset, table, init.backbone.conv1.spec.cin);
  init.params.validate(init.backbone.out_channels(), table.K());

  RpnTrainResultT<T> out;
  out.model = init;
  RpnModelT<T> good = init;
  Rng rng(cfg.seed);
  SgdT<T> sgd(rpn_param_list(out.model), cfg);

  for (int it = 0; it < cfg.iterations; ++it) {
    const int idx = static_cast<int>(
        rng.uniform_int(0, static_cast<int64_t>(dataset.size()) - 1));
    try {
      GraphT<T> g;
      const TensorT<T> image = dataset[static_cast<size_t>(idx)].image.template cast<T>();
      RpnStepT<T> step = rpn_step_graph(g, out.model, scales, table, image,
                                        dataset[static_cast<size_t>(idx)].annotations,
                                        cfg);
      if (step.batch.empty()) {
        SUBCNN_WARN("stage-1 iteration %d: image %d yielded no candidates; skipped",
                    it, idx);
        out.iterations_done = it + 1;
        continue;
      }
      const double total = static_cast<double>(g.value(step.fwd.loss).at(0));
      good = out.model;
      if (it % cfg.log_every == 0 || it == cfg.iterations - 1) {
        out.log.push_back(LossRow{it, total, static_cast<double>(step.fwd.subcls), 0.0,
                                  static_cast<double>(step.fwd.loc)});
      }
      g.backward(step.fwd.loss);
      const std::vector<const TensorT<T>*> grads = {
          &g.grad(step.backbone.w1),     &g.grad(step.backbone.b1),
          &g.grad(step.backbone.w2),     &g.grad(step.backbone.b2),
          &g.grad(step.heads.subcat_w),  &g.grad(step.heads.subcat_b),
          &g.grad(step.heads.bbox_w),    &g.grad(step.heads.bbox_b)};
      sgd.step(grads);
    } catch (const Error& e) {
      if (it == 0) throw;
      SUBCNN_WARN("stage-1 training hit a non-finite value at iteration %d (%s); "
                  "keeping the last stable parameters",
                  it, e.what());
      out.model = good;
      out.aborted = true;
      out.iterations_done = it;
      return out;
    }
    out.iterations_done = it + 1;
  }
  return out;
}

std::vector<Roi> label_det_candidates(const std::vector<Roi>& proposals,
                                      const std::vector<Annotation>& gts,
                                      const std::vector<LevelGeom>& geoms, int stride,
                                      int grid, const SubcategoryTable& table,
                                      double iou_pos) {
  SUBCNN_CHECK(!geoms.empty(), "det candidates: no pyramid levels");
  SUBCNN_CHECK(grid >= 1 && stride >= 1, "det candidates: bad grid/stride");
  SUBCNN_CHECK(iou_pos > 0 && iou_pos <= 1, "det candidates: iou_pos out of (0,1]");
  std::vector<double> level_scales;
  level_scales.reserve(geoms.size());
  for (const LevelGeom& gm : geoms) level_scales.push_back(gm.scale);
  const double target_px = static_cast<double>(grid) * stride;

  std::vector<Roi> pool;
  auto add_candidate = [&](Roi r) {
    if (!r.box.valid()) return;
    const int si = assign_scale(r.box, level_scales, target_px);
    const LevelGeom& gm = geoms[static_cast<size_t>(si)];
    if (!roi_snaps_nonempty(r.box, gm.scale, stride, gm.feat_h, gm.feat_w)) return;
    r.scale_index = si;
    double best = 0.0, ignore_best = 0.0;
    int best_gt = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(r.box, gts[j].box);
      if (gts[j].ignore) {
        ignore_best = std::max(ignore_best, v);
        continue;
      }
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(j);
      }
    }
    if (best_gt >= 0 && best >= iou_pos) {
      const Annotation& gt = gts[static_cast<size_t>(best_gt)];
      SUBCNN_CHECK(gt.class_id >= 1 && gt.class_id <= table.num_classes(),
                   "det candidates: ground truth carries class %d outside the table",
                   gt.class_id);
      SUBCNN_CHECK(gt.subcategory >= 1 && table.class_of(gt.subcategory) == gt.class_id,
                   "det candidates: ground truth lacks a consistent subcategory");
      r.label_class = gt.class_id;
      r.label_subcategory = gt.subcategory;
      r.target = encode_box(r.box, gt.box);
    } else {
      if (ignore_best >= iou_pos) return;  // likely an unlabeled object; keep out
      r.label_class = 0;
      r.label_subcategory = 0;
      r.target = BoxDelta{};
    }
    pool.push_back(std::move(r));
  };

  for (const Roi& p : proposals) add_candidate(p);
  for (const Annotation& gt : gts) {
    if (gt.ignore) continue;
    Roi r;
    r.box = gt.box;
    r.score = 1.0;
    add_candidate(std::move(r));
  }
  return pool;
}

std::vector<Roi> sample_det_batch(const std::vector<Roi>& pool, int rois,
                                  double positive_fraction, Rng& rng) {
  SUBCNN_CHECK(rois >= 1, "det batch: rois must be >= 1");
  SUBCNN_CHECK(positive_fraction >= 0 && positive_fraction <= 1,
               "det batch: positive fraction out of [0,1]");
  if (pool.empty()) return {};

  std::vector<int> pos, neg;
  for (size_t i = 0; i < pool.size(); ++i) {
    (pool[i].label_class >= 1 ? pos : neg).push_back(static_cast<int>(i));
  }
  auto shuffle = [&rng](std::vector<int>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j =
          static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  };
  shuffle(pos);
  shuffle(neg);

  int n_pos = static_cast<int>(std::lround(rois * positive_fraction));
  if (pos.empty() && n_pos > 0) {
    SUBCNN_WARN("det batch: no positive candidates; sampling negatives only");
    n_pos = 0;
  }
  int n_neg = rois - n_pos;
  if (neg.empty() && n_neg > 0) {
    SUBCNN_WARN("det batch: no negative candidates; sampling positives only");
    n_pos = rois;
    n_neg = 0;
  }
  std::vector<Roi> batch;
  batch.reserve(static_cast<size_t>(rois));
  for (int k = 0; k < n_pos; ++k) {
    batch.push_back(pool[static_cast<size_t>(pos[static_cast<size_t>(k) % pos.size()])]);
  }
  for (int k = 0; k < n_neg; ++k) {
    batch.push_back(pool[static_cast<size_t>(neg[static_cast<size_t>(k) % neg.size()])]);
  }
  return batch;
}

template <typename T>
DetTrainResultT<T> train_detector(const std::vector<TrainSample>& dataset,
                                  const std::vector<std::vector<Roi>>& proposals,
                                  const BackboneT<T>& backbone, const ScaleSet& scales,
                                  const SubcategoryTable& table,
                                  const DetParamsT<T>& init, const TrainConfig& cfg) {
  cfg.validate();
  scales.validate();
  table.validate();
  SUBCNN_CHECK(!dataset.empty(), "train det: empty dataset");
  SUBCNN_CHECK(proposals.size() == dataset.size(),
               "train det: %zu proposal lists for %zu images", proposals.size(),
               dataset.size());
  validate_dataset(dataset, table, backbone.conv1.spec.cin);
  init.validate(backbone.out_channels(), table);

  DetTrainResultT<T> out;
  out.params = init;
  DetParamsT<T> good = init;
  Rng rng(cfg.seed);
  SgdT<T> sgd(det_param_list(out.params), cfg);

  // The trunk is frozen and labeling is pure geometry: build each image's
  // candidate pool once.
  const int stride = BackboneT<T>::kStride;
  std::vector<std::vector<LevelGeom>> geoms(dataset.size());
  std::vector<std::vector<Roi>> pools(dataset.size());
  for (size_t i = 0; i < dataset.size(); ++i) {
    geoms[i] = pyramid_geometry(scales, dataset[i].image.dim(0),
                                dataset[i].image.dim(1), stride);
    pools[i] = label_det_candidates(proposals[i], dataset[i].annotations, geoms[i],
                                    stride, init.grid, table, cfg.det_iou_pos);
    if (pools[i].empty()) {
      SUBCNN_WARN("train det: image %zu has no usable candidates", i);
    }
  }

  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<int> picks;
    std::vector<std::vector<Roi>> batches;
    for (int s = 0; s < cfg.det_images; ++s) {
      const int idx = static_cast<int>(
          rng.uniform_int(0, static_cast<int64_t>(dataset.size()) - 1));
      std::vector<Roi> b = sample_det_batch(pools[static_cast<size_t>(idx)],
                                            cfg.det_rois, cfg.det_positive_fraction,
                                            rng);
      if (b.empty()) continue;
      picks.push_back(idx);
      batches.push_back(std::move(b));
    }
    if (picks.empty()) {
      SUBCNN_WARN("stage-2 iteration %d: no usable batches; skipped", it);
      out.iterations_done = it + 1;
      continue;
    }
    try {
      GraphT<T> g;
      DetRefs pr;
      pr.fc1_w = g.input(out.params.fc1_w, true);
      pr.fc1_b = g.input(out.params.fc1_b, true);
      pr.fc2_w = g.input(out.params.fc2_w, true);
      pr.fc2_b = g.input(out.params.fc2_b, true);
      pr.subcat_w = g.input(out.params.subcat_w, true);
      pr.subcat_b = g.input(out.params.subcat_b, true);
      pr.cls_w = g.input(out.params.cls_w, true);
      pr.cls_b = g.input(out.params.cls_b, true);
      pr.box_w = g.input(out.params.box_w, true);
      pr.box_b = g.input(out.params.box_b, true);

      typename GraphT<T>::Ref total = -1;
      double subcls = 0, cls = 0, loc = 0;
      for (size_t s = 0; s < picks.size(); ++s) {
        const TrainSample& sample = dataset[static_cast<size_t>(picks[s])];
        const TensorT<T> image = sample.image.template cast<T>();
        FeaturePyramidT<T> pyr = build_feature_pyramid(image, backbone, scales);
        DetRefs r = pr;
        r.level_features.assign(pyr.levels.size(), -1);
        std::vector<bool> needed(pyr.levels.size(), false);
        for (const Roi& roi : batches[s]) {
          needed[static_cast<size_t>(roi.scale_index)] = true;
        }
        for (size_t l = 0; l < pyr.levels.size(); ++l) {
          if (!needed[l]) continue;
          r.level_features[l] = g.input(crop_valid(pyr.levels[l].features,
                                                   pyr.levels[l].geom.feat_h,
                                                   pyr.levels[l].geom.feat_w));
        }
        DetForwardT<T> fwd = det_forward_loss(
            g, batches[s], geoms[static_cast<size_t>(picks[s])], stride, r, table,
            out.params.grid, static_cast<T>(cfg.lambda1), static_cast<T>(cfg.lambda2));
        total = total < 0 ? fwd.loss : g.add(total, fwd.loss);
        subcls += static_cast<double>(fwd.subcls);
        cls += static_cast<double>(fwd.cls);
        loc += static_cast<double>(fwd.loc);
      }
      total = g.scale(total, T(1) / static_cast<T>(picks.size()));
      const double den = static_cast<double>(picks.size());
      const double tot = static_cast<double>(g.value(total).at(0));
      good = out.params;
      if (it % cfg.log_every == 0 || it == cfg.iterations - 1) {
        out.log.push_back(LossRow{it, tot, subcls / den, cls / den, loc / den});
      }
      g.backward(total);
      const std::vector<const TensorT<T>*> grads = {
          &g.grad(pr.fc1_w), &g.grad(pr.fc1_b), &g.grad(pr.fc2_w), &g.grad(pr.fc2_b),
          &g.grad(pr.subcat_w), &g.grad(pr.subcat_b), &g.grad(pr.cls_w),
          &g.grad(pr.cls_b), &g.grad(pr.box_w), &g.grad(pr.box_b)};
      sgd.step(grads);
    } catch (const Error& e) {
      if (it == 0) throw;
      SUBCNN_WARN("stage-2 training hit a non-finite value at iteration %d (%s); "
                  "keeping the last stable parameters",
                  it, e.what());
      out.params = good;
      out.aborted = true;
      out.iterations_done = it;
      return out;
    }
    out.iterations_done = it + 1;
  }
  return out;
}

namespace {

nlohmann::ordered_json spec_to_json(const ConvSpec& s) {
  nlohmann::ordered_json j;
  j["kh"] = s.kh;
  j["kw"] = s.kw;
  j["cin"] = s.cin;
  j["cout"] = s.cout;
  j["stride"] = s.stride;
  j["pad"] = s.pad;
  return j;
}

ConvSpec spec_from_json(const nlohmann::json& j) {
  ConvSpec s;
  s.kh = j.at("kh").get<int>();
  s.kw = j.at("kw").get<int>();
  s.cin = j.at("cin").get<int>();
  s.cout = j.at("cout").get<int>();
  s.stride = j.at("stride").get<int>();
  s.pad = j.at("pad").get<int>();
  return s;
}

void write_manifest(const std::string& dir, const nlohmann::ordered_json& j) {
  std::ofstream f(dir + "/manifest.json", std::ios::binary);
  SUBCNN_CHECK(f.good(), "checkpoint: cannot write %s/manifest.json", dir.c_str());
  f << j.dump(2) << "\n";
  SUBCNN_CHECK(f.good(), "checkpoint: write to %s failed", dir.c_str());
}

nlohmann::json read_manifest(const std::string& dir, const char* kind) {
  std::ifstream f(dir + "/manifest.json", std::ios::binary);
  SUBCNN_CHECK(f.good(), "checkpoint: cannot read %s/manifest.json", dir.c_str());
  std::ostringstream ss;
  ss << f.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const std::exception& e) {
    SUBCNN_CHECK(false, "checkpoint: bad manifest in %s: %s", dir.c_str(), e.what());
  }
  SUBCNN_CHECK(j.contains("kind") && j["kind"].is_string() &&
                   j["kind"].get<std::string>() == kind,
               "checkpoint: %s does not hold a %s model", dir.c_str(), kind);
  return j;
}

std::string tensor_path(const std::string& dir, const char* name) {
  return dir + "/" + name + ".tns";
}

}  // namespace

void save_rpn_model(const std::string& dir, const RpnModel& model) {
  model.params.validate(model.backbone.out_channels(),
                        model.params.subcat.spec.cout - 1);
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["kind"] = "rpn";
  j["num_classes"] = model.params.num_classes;
  j["conv1"] = spec_to_json(model.backbone.conv1.spec);
  j["conv2"] = spec_to_json(model.backbone.conv2.spec);
  j["subcat"] = spec_to_json(model.params.subcat.spec);
  write_manifest(dir, j);
  save_tensor(tensor_path(dir, "conv1_w"), model.backbone.conv1.weight);
  save_tensor(tensor_path(dir, "conv1_b"), model.backbone.conv1.bias);
  save_tensor(tensor_path(dir, "conv2_w"), model.backbone.conv2.weight);
  save_tensor(tensor_path(dir, "conv2_b"), model.backbone.conv2.bias);
  save_tensor(tensor_path(dir, "subcat_w"), model.params.subcat.weight);
  save_tensor(tensor_path(dir, "subcat_b"), model.params.subcat.bias);
  save_tensor(tensor_path(dir, "bbox_w"), model.params.bbox_w);
  save_tensor(tensor_path(dir, "bbox_b"), model.params.bbox_b);
}

RpnModel load_rpn_model(const std::string& dir) {
  const nlohmann::json j = read_manifest(dir, "rpn");
  RpnModel m;
  try {
    m.params.num_classes = j.at("num_classes").get<int>();
    m.backbone.conv1.spec = spec_from_json(j.at("conv1"));
    m.backbone.conv2.spec = spec_from_json(j.at("conv2"));
    m.params.subcat.spec = spec_from_json(j.at("subcat"));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    SUBCNN_CHECK(false, "checkpoint: bad manifest in %s: %s", dir.c_str(), e.what());
  }
  m.backbone.conv1.weight = load_tensor(tensor_path(dir, "conv1_w"));
  m.backbone.conv1.bias = load_tensor(tensor_path(dir, "conv1_b"));
  m.backbone.conv2.weight = load_tensor(tensor_path(dir, "conv2_w"));
  m.backbone.conv2.bias = load_tensor(tensor_path(dir, "conv2_b"));
  m.params.subcat.weight = load_tensor(tensor_path(dir, "subcat_w"));
  m.params.subcat.bias = load_tensor(tensor_path(dir, "subcat_b"));
  m.params.bbox_w = load_tensor(tensor_path(dir, "bbox_w"));
  m.params.bbox_b = load_tensor(tensor_path(dir, "bbox_b"));
  m.backbone.conv1.validate();
  m.backbone.conv2.validate();
  m.params.validate(m.backbone.out_channels(), m.params.subcat.spec.cout - 1);
  return m;
}

void save_det_params(const std::string& dir, const DetParams& params) {
  SUBCNN_CHECK(params.grid >= 1, "checkpoint: det params carry no grid");
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["kind"] = "det";
  j["grid"] = params.grid;
  write_manifest(dir, j);
  save_tensor(tensor_path(dir, "fc1_w"), params.fc1_w);
  save_tensor(tensor_path(dir, "fc1_b"), params.fc1_b);
  save_tensor(tensor_path(dir, "fc2_w"), params.fc2_w);
  save_tensor(tensor_path(dir, "fc2_b"), params.fc2_b);
  save_tensor(tensor_path(dir, "subcat_w"), params.subcat_w);
  save_tensor(tensor_path(dir, "subcat_b"), params.subcat_b);
  save_tensor(tensor_path(dir, "cls_w"), params.cls_w);
  save_tensor(tensor_path(dir, "cls_b"), params.cls_b);
  save_tensor(tensor_path(dir, "box_w"), params.box_w);
  save_tensor(tensor_path(dir, "box_b"), params.box_b);
}

DetParams load_det_params(const std::string& dir) {
  const nlohmann::json j = read_manifest(dir, "det");
  DetParams p;
  try {
    p.grid = j.at("grid").get<int>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    SUBCNN_CHECK(false, "checkpoint: bad manifest in %s: %s", dir.c_str(), e.what());
  }
  p.fc1_w = load_tensor(tensor_path(dir, "fc1_w"));
  p.fc1_b = load_tensor(tensor_path(dir, "fc1_b"));
  p.fc2_w = load_tensor(tensor_path(dir, "fc2_w"));
  p.fc2_b = load_tensor(tensor_path(dir, "fc2_b"));
  p.subcat_w = load_tensor(tensor_path(dir, "subcat_w"));
  p.subcat_b = load_tensor(tensor_path(dir, "subcat_b"));
  p.cls_w = load_tensor(tensor_path(dir, "cls_w"));
  p.cls_b = load_tensor(tensor_path(dir, "cls_b"));
  p.box_w = load_tensor(tensor_path(dir, "box_w"));
  p.box_b = load_tensor(tensor_path(dir, "box_b"));
  SUBCNN_CHECK(p.grid >= 1 && p.fc1_w.rank() == 2, "checkpoint: malformed det params");
  return p;
}

#define SUBCNN_INSTANTIATE_TRAINER(T)                                                  \
  template RpnModelT<T> init_rpn_model<T>(int, int, int, int, const SubcategoryTable&, \
                                          uint64_t);                                   \
  template DetParamsT<T> init_det_params<T>(int, int, int, const SubcategoryTable&,    \
                                            uint64_t);                                 \
  template class SgdT<T>;                                                              \
  template std::vector<int> tape_pyramid_features<T>(                                  \
      GraphT<T>&, const TensorT<T>&, const BackboneRefs&,                              \
      const std::vector<LevelGeom>&, const std::vector<bool>&);                        \
  template RpnStepT<T> rpn_step_graph<T>(GraphT<T>&, const RpnModelT<T>&,              \
                                         const ScaleSet&, const SubcategoryTable&,     \
                                         const TensorT<T>&,                            \
                                         const std::vector<Annotation>&,               \
                                         const TrainConfig&);                          \
  template RpnTrainResultT<T> train_rpn<T>(const std::vector<TrainSample>&,            \
                                           const ScaleSet&, const SubcategoryTable&,   \
                                           const RpnModelT<T>&, const TrainConfig&);   \
  template DetTrainResultT<T> train_detector<T>(                                       \
      const std::vector<TrainSample>&, const std::vector<std::vector<Roi>>&,           \
      const BackboneT<T>&, const ScaleSet&, const SubcategoryTable&,                   \
      const DetParamsT<T>&, const TrainConfig&);

SUBCNN_INSTANTIATE_TRAINER(float)
SUBCNN_INSTANTIATE_TRAINER(double)

#undef SUBCNN_INSTANTIATE_TRAINER

}  // namespace subcnn
