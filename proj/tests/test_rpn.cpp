#include "subcnn/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "subcnn/common.hpp"
#include "subcnn/layers.hpp"

using namespace subcnn;

namespace {

TensorD randn(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
  return t;
}

Tensor randu(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

// make_backbone leaves the weights zeroed for the trainer; tests want
// feature maps with actual structure in them.
Backbone random_backbone(int in_channels, int c1, int c2, Rng& rng) {
  Backbone bb = make_backbone(in_channels, c1, c2);
  for (auto* p : {&bb.conv1, &bb.conv2}) {
    for (auto& v : p->weight.data) v = static_cast<float>(rng.gaussian() * 0.3);
    for (auto& v : p->bias.data) v = static_cast<float>(rng.gaussian() * 0.1);
  }
  return bb;
}

// Hand-built single-level stack: the map is taken at face value, geometry is
// whatever the test says it is.
template <typename T>
HeatMapStackT<T> single_level_stack(TensorT<T> map, double scale, int stride, int F,
                                    int img_h, int img_w) {
  HeatMapStackT<T> heat;
  heat.maps.push_back(std::move(map));
  heat.scales.push_back(scale);
  heat.stride = stride;
  heat.filter_size = F;
  heat.img_h = img_h;
  heat.img_w = img_w;
  return heat;
}

SubcategoryTable two_class_table() {
  // Two classes, two pose bins each: subcategories 1,2 -> class 1; 3,4 -> 2.
  return orientation_subcategories({"first", "second"}, {{}, {}}, 2);
}

bool same_roi(const Roi& a, const Roi& b) {
  return a.box.x1 == b.box.x1 && a.box.y1 == b.box.y1 && a.box.x2 == b.box.x2 &&
         a.box.y2 == b.box.y2 && a.scale_index == b.scale_index && a.r == b.r &&
         a.c == b.c && a.score == b.score &&
         a.subcategory_argmax == b.subcategory_argmax &&
         a.label_subcategory == b.label_subcategory && a.label_class == b.label_class &&
         a.target.tx == b.target.tx && a.target.ty == b.target.ty &&
         a.target.tw == b.target.tw && a.target.th == b.target.th;
}

}  // namespace

TEST_CASE("subcategory conv: bias-only filters and level counts") {
  Rng rng(101);
  Tensor image = randu({32, 32, 3}, rng);
  Backbone bb = random_backbone(3, 4, 6, rng);
  ScaleSet ss;
  ss.computed = {0.5, 1.0};
  ss.M = 1;
  FeaturePyramid pyr = build_feature_pyramid(image, bb, ss);
  REQUIRE(pyr.levels.size() == 3);  // (N-1)*M + N
  CHECK(pyr.orig_h == 32);
  CHECK(pyr.orig_w == 32);

  ConvParams filters;
  filters.spec = ConvSpec{5, 5, 6, 3, 1, 2};
  filters.weight = Tensor::zeros({5, 5, 6, 3});
  filters.bias = Tensor({3}, {0.1f, -0.2f, 0.3f});

  HeatMapStack heat = subcategory_conv(pyr, filters);
  CHECK(heat.levels() == 3);  // one heat map per pyramid level
  CHECK(heat.channels() == 3);
  CHECK(heat.stride == 4);
  CHECK(heat.filter_size == 5);
  CHECK(heat.img_h == 32);
  for (int l = 0; l < 3; ++l) {
    const auto& geom = pyr.levels[static_cast<size_t>(l)].geom;
    const Tensor& m = heat.maps[static_cast<size_t>(l)];
    CHECK(heat.scales[static_cast<size_t>(l)] == geom.scale);
    REQUIRE(m.dim(0) == geom.feat_h);  // valid extents, not the padded common ones
    REQUIRE(m.dim(1) == geom.feat_w);
    for (const float* p = m.data.data(); p < m.data.data() + m.numel(); p += 3) {
      CHECK(p[0] == 0.1f);  // zero filters leave exactly the bias
      CHECK(p[1] == -0.2f);
      CHECK(p[2] == 0.3f);
    }
  }

  ConvParams bad = filters;
  bad.spec.cin = 5;
  bad.weight = Tensor::zeros({5, 5, 5, 3});
  CHECK_THROWS_AS(subcategory_conv(pyr, bad), Error);  // channel mismatch
}

TEST_CASE("subcategory conv: planted template produces the peak at the plant") {
  Rng rng(202);
  const int H = 12, W = 14, C = 2;
  Tensor features = Tensor::zeros({H, W, C});
  for (auto& v : features.data) v = static_cast<float>(rng.uniform() * 0.1);
  // Plant a strong 3x3 pattern centered at (4, 9).
  const int r0 = 4, c0 = 9;
  Tensor pattern = Tensor::zeros({3, 3, C});
  for (auto& v : pattern.data) v = static_cast<float>(rng.uniform(1.0, 3.0));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < C; ++c)
        features.at(r0 - 1 + i, c0 - 1 + j, c) = pattern.at(i, j, c);

  FeaturePyramid pyr;
  pyr.stride = 4;
  pyr.channels = C;
  pyr.common_h = H;
  pyr.common_w = W;
  pyr.orig_h = H * 4;
  pyr.orig_w = W * 4;
  PyramidLevelT<float> lvl;
  lvl.features = features;
  lvl.geom.scale = 1.0;
  lvl.geom.is_computed = true;
  lvl.geom.img_h = H * 4;
  lvl.geom.img_w = W * 4;
  lvl.geom.feat_h = H;
  lvl.geom.feat_w = W;
  pyr.levels.push_back(lvl);

  ConvParams filters;
  filters.spec = ConvSpec{3, 3, C, 2, 1, 1};
  filters.weight = Tensor::zeros({3, 3, C, 2});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < C; ++c) filters.weight.at(i, j, c, 1) = pattern.at(i, j, c);
  filters.bias = Tensor::zeros({2});

  HeatMapStack heat = subcategory_conv(pyr, filters);
  const Tensor& m = heat.maps[0];
  // Exhaustive scan for the argmax of the non-background channel.
  int best_r = -1, best_c = -1;
  float best = -1e30f;
  for (int r = 0; r < m.dim(0); ++r)
    for (int c = 0; c < m.dim(1); ++c)
      if (m.at(r, c, 1) > best) {
        best = m.at(r, c, 1);
        best_r = r;
        best_c = c;
      }
  CHECK(best_r == r0);
  CHECK(best_c == c0);
}

TEST_CASE("candidate boxes: canonical mapping and aspect sweep") {
  // Stated mapping: peak (r,c) = (8,10), F=5, S=4, scale .2e1 -> center
  // (21, 17), side 10.
  auto only = candidate_boxes(8, 10, 5, 4, 2.0, {});
  REQUIRE(only.size() == 1);
  CHECK(only[0].x1 == 16.0);
  CHECK(only[0].y1 == 12.0);
  CHECK(only[0].x2 == 26.0);
  CHECK(only[0].y2 == 22.0);
  CHECK(only[0].cx() == 21.0);
  CHECK(only[0].cy() == 17.0);

  // Aspect variants keep the area and center; height/width equals the ratio.
  auto two = candidate_boxes(8, 10, 5, 4, 2.0, {2.0});
  REQUIRE(two.size() == 2);
  CHECK(two[1].h() / two[1].w() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(two[1].w() * two[1].h() == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(two[1].cx() == doctest::Approx(21.0).epsilon(1e-12));
  CHECK(two[1].cy() == doctest::Approx(17.0).epsilon(1e-12));

  // A unit ratio duplicates the canonical box and is dropped.
  CHECK(candidate_boxes(3, 3, 5, 4, 1.0, {1.0}).size() == 1);
  // Default sweep: canonical + 7 ratios, one of which is the unit ratio.
  auto sweep = candidate_boxes(3, 3, 5, 4, 1.0, kDefaultAspectRatios);
  CHECK(kDefaultAspectRatios.size() == 7);
  CHECK(sweep.size() == 7);
  for (size_t i = 0; i < sweep.size(); ++i) {
    CHECK(sweep[i].w() * sweep[i].h() == doctest::Approx(400.0).epsilon(1e-9));
    for (size_t j = i + 1; j < sweep.size(); ++j) {
      CHECK((sweep[i].x1 != sweep[j].x1 || sweep[i].y1 != sweep[j].y1));
    }
  }

  // Independent recomputation of every box from the stated formulas.
  const double unit = 4.0 / 1.0;
  const double cx = 3.5 * unit, cy = 3.5 * unit, side = 5 * unit;
  size_t out = 1;
  for (double a : kDefaultAspectRatios) {
    if (a == 1.0) continue;
    const double w = side / std::sqrt(a), h = side * std::sqrt(a);
    CHECK(sweep[out].x1 == cx - 0.5 * w);
    CHECK(sweep[out].y1 == cy - 0.5 * h);
    CHECK(sweep[out].x2 == cx + 0.5 * w);
    CHECK(sweep[out].y2 == cy + 0.5 * h);
    ++out;
  }

  CHECK_THROWS_AS(candidate_boxes(0, 0, 5, 4, 1.0, {-2.0}), Error);
  CHECK_THROWS_AS(candidate_boxes(0, 0, 5, 4, 0.0, {}), Error);
}

TEST_CASE("test-mode roi generation from a single hot location") {
  // 16x16 map, all logits zero except one strong non-background channel at
  // (8, 10); uniform locations score 1/3, the hot one nearly 1.
  Tensor map = Tensor::zeros({16, 16, 3});
  map.at(8, 10, 1) = 25.0f;
  HeatMapStack heat = single_level_stack(std::move(map), 2.0, 4, 5, 40, 40);

  auto rois = generate_rois_test(heat, 0.9, {}, 100);
  REQUIRE(rois.size() == 1);
  CHECK(rois[0].box.x1 == 16.0);
  CHECK(rois[0].box.y1 == 12.0);
  CHECK(rois[0].box.x2 == 26.0);
  CHECK(rois[0].box.y2 == 22.0);
  CHECK(rois[0].r == 8);
  CHECK(rois[0].c == 10);
  CHECK(rois[0].scale_index == 0);
  CHECK(rois[0].subcategory_argmax == 1);
  CHECK(rois[0].score > 0.999);

  // Default ratio sweep: seven distinct boxes from the one location.
  CHECK(generate_rois_test(heat, 0.9, kDefaultAspectRatios, 100).size() == 7);
  // A ratio list without the unit ratio adds to the canonical box.
  CHECK(generate_rois_test(heat, 0.9, {2.0, 0.5}, 100).size() == 3);
  // The budget caps the output.
  CHECK(generate_rois_test(heat, 0.9, kDefaultAspectRatios, 2).size() == 2);
  // Threshold above every score: empty output is fine.
  CHECK(generate_rois_test(heat, 2.0, {}, 100).empty());

  CHECK_THROWS_AS(
      generate_rois_test(heat, std::numeric_limits<double>::infinity(), {}, 10), Error);
  CHECK_THROWS_AS(generate_rois_test(heat, 0.5, {}, 0), Error);

  // A corner peak produces a clipped, still-valid box.
  Tensor corner = Tensor::zeros({16, 16, 3});
  corner.at(0, 0, 2) = 25.0f;
  HeatMapStack hc = single_level_stack(std::move(corner), 2.0, 4, 5, 40, 40);
  auto clipped = generate_rois_test(hc, 0.9, {}, 10);
  REQUIRE(clipped.size() == 1);
  CHECK(clipped[0].box.x1 == 0.0);
  CHECK(clipped[0].box.y1 == 0.0);
  CHECK(clipped[0].box.x2 == 6.0);
  CHECK(clipped[0].box.y2 == 6.0);
  CHECK(clipped[0].subcategory_argmax == 2);
}

TEST_CASE("percentile threshold keeps the requested candidate count") {
  // Strictly increasing scores across the 16 locations.
  Tensor map = Tensor::zeros({4, 4, 2});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) map.at(r, c, 1) = 0.5f * (r * 4 + c);
  HeatMapStack heat = single_level_stack(std::move(map), 1.0, 4, 3, 16, 16);

  const double t5 = percentile_threshold(heat, 5);
  CHECK(generate_rois_test(heat, t5, {}, 1000).size() == 5);
  const double t1 = percentile_threshold(heat, 1);
  auto top1 = generate_rois_test(heat, t1, {}, 1000);
  REQUIRE(top1.size() == 1);
  CHECK(top1[0].r == 3);
  CHECK(top1[0].c == 3);

  // Asking for at least as many as exist keeps everything.
  const double tall = percentile_threshold(heat, 16);
  CHECK(generate_rois_test(heat, tall, {}, 1000).size() == 16);
  CHECK(std::isfinite(tall));

  CHECK_THROWS_AS(percentile_threshold(heat, 0), Error);
}

TEST_CASE("hard mining matches an independent enumerate-label-sort oracle") {
  Rng rng(707);
  HeatMapStackT<float> heat;
  heat.stride = 4;
  heat.filter_size = 5;
  heat.img_h = 40;
  heat.img_w = 48;
  heat.scales = {1.0, 2.0};
  heat.maps.push_back(randn({10, 12, 7}, rng).cast<float>());
  heat.maps.push_back(randn({20, 24, 7}, rng).cast<float>());

  // Three classes x two pose bins -> 7 heat-map channels; subcategory ids
  // 1,2 belong to class 1; 3,4 to class 2; 5,6 to class 3.
  std::vector<Annotation> gts(3);
  gts[0].class_id = 1;
  gts[0].subcategory = 1;
  gts[0].box = Box{5, 5, 25, 25};
  gts[1].class_id = 2;
  gts[1].subcategory = 4;
  gts[1].box = Box{24, 16, 44, 38};
  gts[2].class_id = 3;
  gts[2].subcategory = 5;
  gts[2].box = Box{2, 20, 20, 39};

  const int R = 24;
  const double alpha = 0.5;
  auto batch = generate_rois_train(heat, gts, R, alpha, 0.7, 0.3);
  REQUIRE(batch.size() == 24);

  // R*alpha positives first, the rest negatives.
  int positives = 0;
  for (const Roi& r : batch) positives += r.label_class >= 1 ? 1 : 0;
  CHECK(positives == 12);
  for (int i = 0; i < 12; ++i) CHECK(batch[static_cast<size_t>(i)].label_class >= 1);
  for (int i = 12; i < 24; ++i) {
    CHECK(batch[static_cast<size_t>(i)].label_class == 0);
    CHECK(batch[static_cast<size_t>(i)].label_subcategory == 0);
  }

  // Bit-identical across runs.
  auto again = generate_rois_train(heat, gts, R, alpha, 0.7, 0.3);
  REQUIRE(again.size() == batch.size());
  for (size_t i = 0; i < batch.size(); ++i) CHECK(same_roi(batch[i], again[i]));

  // Independent oracle: re-enumerate with local formula code, label, sort.
  struct Cand {
    Box box;
    double score;
    int level, r, c, argmax;
    int gt = -1;
    double iou_best = 0, iou_ignore = 0;
  };
  std::vector<Cand> cands;
  for (int l = 0; l < 2; ++l) {
    const auto& m = heat.maps[static_cast<size_t>(l)];
    const double scale = heat.scales[static_cast<size_t>(l)];
    for (int r = 0; r < m.dim(0); ++r)
      for (int c = 0; c < m.dim(1); ++c) {
        // local softmax
        double mx = -1e300, Z = 0;
        for (int k = 0; k < 7; ++k) mx = std::max(mx, static_cast<double>(m.at(r, c, k)));
        std::vector<double> e(7);
        for (int k = 0; k < 7; ++k) {
          e[static_cast<size_t>(k)] = std::exp(static_cast<double>(m.at(r, c, k)) - mx);
          Z += e[static_cast<size_t>(k)];
        }
        double sc = -1;
        int arg = 1;
        for (int k = 1; k < 7; ++k)
          if (e[static_cast<size_t>(k)] / Z > sc) {
            sc = e[static_cast<size_t>(k)] / Z;
            arg = k;
          }
        const double unit = 4.0 / scale;
        const double cx = (c + 0.5) * unit, cy = (r + 0.5) * unit;
        std::vector<std::pair<double, double>> dims = {{5 * unit, 5 * unit}};
        for (double a : {3.0, 2.0, 1.5, 1.0, 0.75, 0.5, 0.25}) {
          if (a == 1.0) continue;
          dims.push_back({5 * unit / std::sqrt(a), 5 * unit * std::sqrt(a)});
        }
        for (auto [w, h] : dims) {
          Cand cd;
          cd.box = Box{std::max(0.0, cx - 0.5 * w), std::max(0.0, cy - 0.5 * h),
                       std::min(48.0, cx + 0.5 * w), std::min(40.0, cy + 0.5 * h)};
          if (!(cd.box.x2 > cd.box.x1 && cd.box.y2 > cd.box.y1)) continue;
          const double f = scale / 4.0;
          auto snap = [f](double v) { return std::llround(v * f); };
          if (std::clamp(snap(cd.box.x2), 0ll, static_cast<long long>(m.dim(1))) <=
                  std::clamp(snap(cd.box.x1), 0ll, static_cast<long long>(m.dim(1))) ||
              std::clamp(snap(cd.box.y2), 0ll, static_cast<long long>(m.dim(0))) <=
                  std::clamp(snap(cd.box.y1), 0ll, static_cast<long long>(m.dim(0)))) {
            continue;
          }
          cd.score = sc;
          cd.level = l;
          cd.r = r;
          cd.c = c;
          cd.argmax = arg;
          for (size_t gi = 0; gi < gts.size(); ++gi) {
            const Box& gb = gts[gi].box;
            const double ix = std::max(
                0.0, std::min(cd.box.x2, gb.x2) - std::max(cd.box.x1, gb.x1));
            const double iy = std::max(
                0.0, std::min(cd.box.y2, gb.y2) - std::max(cd.box.y1, gb.y1));
            const double inter = ix * iy;
            const double uni = cd.box.area() + gb.area() - inter;
            const double v = uni > 0 ? inter / uni : 0.0;
            if (v > cd.iou_best) {
              cd.iou_best = v;
              cd.gt = static_cast<int>(gi);
            }
          }
          cands.push_back(cd);
        }
      }
  }
  std::vector<Cand> pos, neg;
  for (const Cand& cd : cands) {
    if (cd.gt >= 0 && cd.iou_best >= 0.7) {
      pos.push_back(cd);
    } else if (cd.iou_best < 0.3) {
      neg.push_back(cd);
    }
  }
  std::stable_sort(pos.begin(), pos.end(),
                   [](const Cand& a, const Cand& b) { return a.score < b.score; });
  std::stable_sort(neg.begin(), neg.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });
  REQUIRE(pos.size() >= 1);
  REQUIRE(neg.size() >= 12);

  for (int i = 0; i < 12; ++i) {
    const Cand& expect = pos[static_cast<size_t>(i) % pos.size()];
    const Roi& got = batch[static_cast<size_t>(i)];
    CHECK(got.box.x1 == expect.box.x1);
    CHECK(got.box.y1 == expect.box.y1);
    CHECK(got.box.x2 == expect.box.x2);
    CHECK(got.box.y2 == expect.box.y2);
    CHECK(got.score == expect.score);
    CHECK(got.scale_index == expect.level);
    CHECK(got.label_class == gts[static_cast<size_t>(expect.gt)].class_id);
    CHECK(got.label_subcategory == gts[static_cast<size_t>(expect.gt)].subcategory);
    // Regression target re-derived from the matched gt.
    const BoxDelta t = encode_box(got.box, gts[static_cast<size_t>(expect.gt)].box);
    CHECK(got.target.tx == t.tx);
    CHECK(got.target.ty == t.ty);
    CHECK(got.target.tw == t.tw);
    CHECK(got.target.th == t.th);
  }
  for (int i = 0; i < 12; ++i) {
    const Cand& expect = neg[static_cast<size_t>(i)];
    const Roi& got = batch[static_cast<size_t>(12 + i)];
    CHECK(got.box.x1 == expect.box.x1);
    CHECK(got.score == expect.score);
    CHECK(got.subcategory_argmax == expect.argmax);
  }
}

TEST_CASE("hard mining: quota padding, all-negative fallback, ignore handling") {
  // One gt that exactly equals a single candidate box: the canonical window
  // at (r,c) = (2,2) on a stride-4, scale-1 level is (0,0,20,20). With
  // iou_pos = 0.9 no other candidate reaches the positive pool.
  Tensor map = Tensor::zeros({6, 6, 3});
  map.at(2, 2, 1) = 3.0f;
  HeatMapStack heat = single_level_stack(std::move(map), 1.0, 4, 5, 24, 24);
  Annotation gt;
  gt.class_id = 1;
  gt.subcategory = 1;
  gt.box = Box{0, 0, 20, 20};

  auto batch = generate_rois_train(heat, {gt}, 8, 0.5, 0.9, 0.3);
  REQUIRE(batch.size() == 8);
  int pos = 0;
  for (const Roi& r : batch) pos += r.label_class == 1 ? 1 : 0;
  CHECK(pos == 4);
  // All four positives are the same duplicated candidate.
  for (int i = 1; i < 4; ++i) CHECK(same_roi(batch[0], batch[static_cast<size_t>(i)]));
  CHECK(batch[0].box.x1 == 0.0);
  CHECK(batch[0].box.y1 == 0.0);
  CHECK(batch[0].box.x2 == 20.0);
  CHECK(batch[0].box.y2 == 20.0);
  CHECK(batch[0].target.tx == 0.0);  // exact alignment -> zero deltas
  CHECK(batch[0].target.tw == 0.0);

  // No ground truth: all-negative batch (the warning goes to the log).
  auto none = generate_rois_train(heat, {}, 10, 0.5, 0.7, 0.3);
  REQUIRE(none.size() == 10);
  for (const Roi& r : none) CHECK(r.label_class == 0);

  // An ignore region keeps overlapping candidates out of the negative pool.
  Annotation ign = gt;
  ign.ignore = true;
  auto guarded = generate_rois_train(heat, {ign}, 10, 0.5, 0.7, 0.3);
  for (const Roi& r : guarded) {
    CHECK(r.label_class == 0);
    CHECK(iou(r.box, ign.box) < 0.3);
  }

  // Positive gt missing its subcategory assignment is an error.
  Annotation unset = gt;
  unset.subcategory = 0;
  CHECK_THROWS_AS(generate_rois_train(heat, {unset}, 8, 0.5, 0.9, 0.3), Error);

  CHECK_THROWS_AS(generate_rois_train(heat, {gt}, 0, 0.5, 0.7, 0.3), Error);
  CHECK_THROWS_AS(generate_rois_train(heat, {gt}, 8, 0.0, 0.7, 0.3), Error);
  CHECK_THROWS_AS(generate_rois_train(heat, {gt}, 8, 1.0, 0.7, 0.3), Error);
  CHECK_THROWS_AS(generate_rois_train(heat, {gt}, 8, 0.5, 0.3, 0.7), Error);
}

TEST_CASE("proposal selection: nms then budget") {
  std::vector<Roi> rois(3);
  rois[0].box = Box{0, 0, 10, 10};
  rois[0].score = 0.9;
  rois[1].box = Box{1, 1, 11, 11};  // IoU with #0 about 0.68: survives at 0.7
  rois[1].score = 0.8;
  rois[2].box = Box{0.5, 0.5, 10.5, 10.5};  // IoU with #0 about 0.82: suppressed
  rois[2].score = 0.7;

  auto kept = select_proposals(rois, 0.7, 10);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].score == 0.8);

  auto one = select_proposals(rois, 0.7, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].score == 0.9);

  CHECK(select_proposals({}, 0.7, 10).empty());
  CHECK_THROWS_AS(select_proposals(rois, 0.0, 10), Error);
  CHECK_THROWS_AS(select_proposals(rois, 0.7, 0), Error);
}

TEST_CASE("shared weights: pooled-path logits equal heat-map values") {
  Rng rng(4321);
  Tensor image = randu({40, 40, 3}, rng);
  Backbone bb = random_backbone(3, 4, 6, rng);
  ScaleSet ss;
  ss.computed = {1.0, 2.0};
  ss.M = 1;
  FeaturePyramid pyr = build_feature_pyramid(image, bb, ss);
  REQUIRE(pyr.levels.size() == 3);

  const int K = 4;
  ConvParams filters;
  filters.spec = ConvSpec{5, 5, 6, K + 1, 1, 2};
  filters.weight = randn({5, 5, 6, K + 1}, rng, 0.1).cast<float>();
  filters.bias = randn({K + 1}, rng, 0.1).cast<float>();
  HeatMapStack heat = subcategory_conv(pyr, filters);

  // Interior location (r, c) = (5, 4) at the scale-1 level: the canonical box
  // maps back to exactly the 5x5 window around it.
  const int r = 5, c = 4;
  Roi roi;
  roi.box = candidate_boxes(r, c, 5, 4, 1.0, {})[0];
  roi.scale_index = 0;
  roi.r = r;
  roi.c = c;
  CHECK(roi.box.x1 == (c - 2) * 4.0);
  CHECK(roi.box.y2 == (r + 3) * 4.0);

  SubcategoryTable table = two_class_table();  // K = 4
  Graph g;
  RpnRefs refs;
  refs.subcat_w = g.input(filters.weight);
  refs.subcat_b = g.input(filters.bias);
  refs.bbox_w = g.input(Tensor::zeros({5 * 5 * 6, 4 * 3}));
  refs.bbox_b = g.input(Tensor::zeros({4 * 3}));
  refs.level_features.assign(3, -1);
  refs.level_features[0] = g.input(
      crop_valid(pyr.levels[0].features, pyr.levels[0].geom.feat_h, pyr.levels[0].geom.feat_w));

  std::vector<LevelGeom> geoms;
  for (const auto& l : pyr.levels) geoms.push_back(l.geom);
  auto fwd = rpn_forward_loss(g, {roi}, geoms, pyr.stride, refs, table, 1.0f);
  for (int k = 0; k <= K; ++k) {
    CHECK(std::abs(static_cast<double>(fwd.logits.at(0, k)) -
                   static_cast<double>(heat.maps[0].at(r, c, k))) <= 1e-5);
  }
}

TEST_CASE("proposal loss: gating, reductions, and label validation") {
  Rng rng(5555);
  SubcategoryTable table = two_class_table();
  const int K = table.K();  // 4
  const int F = 3, C = 2;

  TensorD feat = randn({8, 9, C}, rng, 0.5);
  TensorD w = randn({F, F, C, K + 1}, rng, 0.3);
  TensorD b = randn({K + 1}, rng, 0.1);
  TensorD bw = randn({F * F * C, 4 * 3}, rng, 0.2);
  TensorD bb = randn({4 * 3}, rng, 0.1);

  std::vector<LevelGeom> geoms(1);
  geoms[0].scale = 1.0;
  geoms[0].feat_h = 8;
  geoms[0].feat_w = 9;
  geoms[0].img_h = 32;
  geoms[0].img_w = 36;

  auto make_roi = [](Box box, int subcat, int cls, BoxDelta t) {
    Roi r;
    r.box = box;
    r.scale_index = 0;
    r.label_subcategory = subcat;
    r.label_class = cls;
    r.target = t;
    return r;
  };
  std::vector<Roi> rois = {
      make_roi(Box{8, 4, 20, 16}, 1, 1, BoxDelta{0.1, -0.2, 0.05, 0.3}),
      make_roi(Box{4, 8, 16, 24}, 0, 0, BoxDelta{}),
      make_roi(Box{16, 12, 32, 28}, 4, 2, BoxDelta{-0.15, 0.1, 0.2, -0.1}),
  };

  auto run = [&](double lambda, const std::vector<Roi>& batch, GraphD* out_g,
                 RpnForwardT<double>* out_fwd) {
    GraphD g;
    RpnRefs refs;
    refs.level_features = {g.input(feat, true)};
    refs.subcat_w = g.input(w, true);
    refs.subcat_b = g.input(b, true);
    refs.bbox_w = g.input(bw, true);
    refs.bbox_b = g.input(bb, true);
    *out_fwd = rpn_forward_loss(g, batch, geoms, 4, refs, table, lambda);
    *out_g = std::move(g);
  };

  GraphD g;
  RpnForwardT<double> fwd;
  run(0.7, rois, &g, &fwd);
  CHECK(fwd.logits.dim(0) == 3);
  CHECK(fwd.logits.dim(1) == K + 1);
  CHECK(fwd.deltas.dim(0) == 3);
  CHECK(g.value(fwd.loss).at(0) == fwd.subcls + fwd.loc);
  CHECK(fwd.loc > 0.0);

  // lambda = 0: the total equals the classification term exactly.
  GraphD g0;
  RpnForwardT<double> fwd0;
  run(0.0, rois, &g0, &fwd0);
  CHECK(fwd0.loc == 0.0);
  CHECK(g0.value(fwd0.loss).at(0) == fwd0.subcls);

  // Background-only batch: the regression term is gated off entirely.
  std::vector<Roi> bg = {rois[1]};
  GraphD gb;
  RpnForwardT<double> fwdb;
  run(1.0, bg, &gb, &fwdb);
  CHECK(fwdb.loc == 0.0);
  CHECK(g.value(fwd.loss).at(0) > 0.0);

  // Gradient check through pooling, shared weights, and both loss terms.
  double err = grad_check(
      [&](GraphD& gg, const std::vector<GraphD::Ref>& in) {
        RpnRefs refs;
        refs.level_features = {in[0]};
        refs.subcat_w = in[1];
        refs.subcat_b = in[2];
        refs.bbox_w = in[3];
        refs.bbox_b = in[4];
        return rpn_forward_loss(gg, rois, geoms, 4, refs, table, 0.7).loss;
      },
      {feat, w, b, bw, bb});
  CHECK(err < 1e-4);

  // Label inconsistencies.
  auto bad1 = rois;
  bad1[0].label_class = 0;  // positive subcategory on a background roi
  GraphD gx;
  RpnForwardT<double> fx;
  CHECK_THROWS_AS(run(1.0, bad1, &gx, &fx), Error);
  auto bad2 = rois;
  bad2[0].label_subcategory = 0;  // positive roi with background subcategory
  CHECK_THROWS_AS(run(1.0, bad2, &gx, &fx), Error);
  auto bad3 = rois;
  bad3[0].label_subcategory = 3;  // subcategory of the wrong class
  CHECK_THROWS_AS(run(1.0, bad3, &gx, &fx), Error);
  CHECK_THROWS_AS(run(1.0, {}, &gx, &fx), Error);
}

TEST_CASE("proposal loss: perfect predictions drive the loss to zero") {
  SubcategoryTable table = two_class_table();
  const int F = 3, C = 2;
  TensorD feat = TensorD::zeros({6, 6, C});
  TensorD w = TensorD::zeros({F, F, C, 5});
  TensorD b({5}, {-30, 30, -30, -30, -30});
  TensorD bw = TensorD::zeros({F * F * C, 12});
  TensorD bb = TensorD::zeros({12});
  const BoxDelta target{0.12, -0.34, 0.05, -0.07};
  bb.at(4) = target.tx;  // class-1 block of the regression output
  bb.at(5) = target.ty;
  bb.at(6) = target.tw;
  bb.at(7) = target.th;

  std::vector<LevelGeom> geoms(1);
  geoms[0].scale = 1.0;
  geoms[0].feat_h = 6;
  geoms[0].feat_w = 6;
  geoms[0].img_h = 24;
  geoms[0].img_w = 24;

  Roi roi;
  roi.box = Box{4, 4, 16, 16};
  roi.scale_index = 0;
  roi.label_subcategory = 1;
  roi.label_class = 1;
  roi.target = target;

  GraphD g;
  RpnRefs refs;
  refs.level_features = {g.input(feat)};
  refs.subcat_w = g.input(w);
  refs.subcat_b = g.input(b);
  refs.bbox_w = g.input(bw);
  refs.bbox_b = g.input(bb);
  auto fwd = rpn_forward_loss(g, {roi}, geoms, 4, refs, table, 1.0);
  CHECK(g.value(fwd.loss).at(0) <= 1e-9);
}

TEST_CASE("heat maps are outside the gradient graph") {
  Rng rng(808);
  Tensor image = randu({32, 32, 3}, rng);
  Backbone bb = random_backbone(3, 4, 6, rng);
  ScaleSet ss;
  ss.computed = {1.0};
  ss.M = 0;
  FeaturePyramid pyr = build_feature_pyramid(image, bb, ss);

  ConvParams filters;
  filters.spec = ConvSpec{5, 5, 6, 5, 1, 2};
  filters.weight = randn({5, 5, 6, 5}, rng, 0.1).cast<float>();
  filters.bias = Tensor::zeros({5});

  HeatMapStack heat = subcategory_conv(pyr, filters);
  auto rois = generate_rois_test(heat, percentile_threshold(heat, 4), {}, 4);
  REQUIRE(!rois.empty());
  for (auto& r : rois) {  // label them background to form a valid batch
    r.label_subcategory = 0;
    r.label_class = 0;
  }

  SubcategoryTable table = two_class_table();
  std::vector<LevelGeom> geoms = {pyr.levels[0].geom};
  auto build_loss = [&](float* out) {
    Graph g;
    RpnRefs refs;
    refs.level_features = {g.input(crop_valid(pyr.levels[0].features,
                                              pyr.levels[0].geom.feat_h,
                                              pyr.levels[0].geom.feat_w))};
    refs.subcat_w = g.input(filters.weight);
    refs.subcat_b = g.input(filters.bias);
    refs.bbox_w = g.input(Tensor::zeros({5 * 5 * 6, 12}));
    refs.bbox_b = g.input(Tensor::zeros({12}));
    auto fwd = rpn_forward_loss(g, rois, geoms, pyr.stride, refs, table, 1.0f);
    *out = g.value(fwd.loss).at(0);
  };
  float loss_a = 0, loss_b = 0;
  build_loss(&loss_a);
  // Recompute the heat maps with completely different filters: the RoIs are
  // plain data, so the loss built from them cannot change.
  ConvParams other = filters;
  other.weight = randn({5, 5, 6, 5}, rng).cast<float>();
  HeatMapStack ignored = subcategory_conv(pyr, other);
  (void)ignored;
  build_loss(&loss_b);
  CHECK(loss_a == loss_b);
}

TEST_CASE("proposal csv round trip") {
  std::vector<std::vector<Roi>> per_image(2);
  Roi a;
  a.box = Box{1.25, 2.5, 30.75, 40.125};
  a.score = 0.987654321012345;
  a.scale_index = 3;
  a.subcategory_argmax = 7;
  per_image[0].push_back(a);
  Roi bt;
  bt.box = Box{0.1, 0.2, 10.3, 20.4};
  bt.score = 1.0 / 3.0;
  bt.scale_index = 0;
  bt.subcategory_argmax = 1;
  per_image[1].push_back(bt);
  per_image[1].push_back(a);

  const std::string csv = proposals_to_csv(per_image);
  CHECK(csv.rfind("image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  auto parsed = proposals_from_csv(csv);
  REQUIRE(parsed.size() == 2);
  REQUIRE(parsed[0].size() == 1);
  REQUIRE(parsed[1].size() == 2);
  CHECK(parsed[0][0].box.x1 == a.box.x1);
  CHECK(parsed[0][0].box.y2 == a.box.y2);
  CHECK(parsed[0][0].score == a.score);     // %.17g survives the round trip
  CHECK(parsed[1][0].score == 1.0 / 3.0);
  CHECK(parsed[1][1].scale_index == 3);
  CHECK(parsed[1][1].subcategory_argmax == 7);

  // Deterministic output.
  CHECK(proposals_to_csv(per_image) == csv);

  CHECK_THROWS_AS(proposals_from_csv(""), Error);
  CHECK_THROWS_AS(proposals_from_csv("x1,y1\n"), Error);
  CHECK_THROWS_AS(
      proposals_from_csv("image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax\n"
                         "0,1,2,3\n"),
      Error);
  CHECK_THROWS_AS(
      proposals_from_csv("image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax\n"
                         "0,1,2,3,4,0.5,0,1,junk\n"),
      Error);
  CHECK(proposals_from_csv(
            "image_id,x1,y1,x2,y2,score,scale_index,subcategory_argmax\n")
            .empty());
}
