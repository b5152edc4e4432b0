#include "subcnn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subcnn/common.hpp"

namespace subcnn {

Box box_from_center(double cx, double cy, double w, double h) {
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

double iou(const Box& a, const Box& b) {
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

BoxDelta encode_box(const Box& roi, const Box& gt) {
  SUBCNN_CHECK(roi.valid() && gt.valid(), "encode_box: non-positive extents");
  return {(gt.cx() - roi.cx()) / roi.w(), (gt.cy() - roi.cy()) / roi.h(),
          std::log(gt.w() / roi.w()), std::log(gt.h() / roi.h())};
}

Box decode_box(const Box& roi, const BoxDelta& d) {
  SUBCNN_CHECK(roi.valid(), "decode_box: non-positive extents");
  double cx = roi.cx() + d.tx * roi.w();
  double cy = roi.cy() + d.ty * roi.h();
  double w = roi.w() * std::exp(d.tw);
  double h = roi.h() * std::exp(d.th);
  return box_from_center(cx, cy, w, h);
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  SUBCNN_CHECK(boxes.size() == scores.size(), "nms: boxes/scores size mismatch");
  for (double s : scores) SUBCNN_CHECK(std::isfinite(s), "nms: non-finite score");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    int i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      int j = order[oj];
      if (!dead[j] && iou(boxes[i], boxes[j]) > iou_thresh) dead[j] = 1;
    }
  }
  return keep;
}

double wrap_angle(double a) {
  double t = std::fmod(a + M_PI, 2 * M_PI);
  if (t < 0) t += 2 * M_PI;
  return t - M_PI;
}

double orientation_similarity(double theta_a, double theta_b) {
  return 0.5 * (1.0 + std::cos(theta_a - theta_b));
}

int orientation_bin(double theta, int n_bins) {
  SUBCNN_CHECK(n_bins >= 1, "orientation_bin: n_bins < 1");
  double t = theta - std::floor(theta / (2 * M_PI)) * 2 * M_PI;  // [0, 2pi)
  int j = static_cast<int>(std::floor(t * n_bins / (2 * M_PI) + 0.5));
  return j % n_bins;
}

}  // namespace subcnn
