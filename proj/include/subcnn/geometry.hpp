#pragma once

#include <vector>

namespace subcnn {

/// Axis-aligned box, inclusive-exclusive pixel convention: width = x2 - x1,
/// no "+1" anywhere.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return w() > 0 && h() > 0 ? w() * h() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

Box box_from_center(double cx, double cy, double w, double h);
/// Clips to [0, width] x [0, height]; may yield an invalid (empty) box.
Box clip_box(const Box& b, double width, double height);

double iou(const Box& a, const Box& b);

/// Scale-invariant translation plus log-space size shift relative to a RoI.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

BoxDelta encode_box(const Box& roi, const Box& gt);
Box decode_box(const Box& roi, const BoxDelta& d);

/// Greedy NMS by descending score (ties broken by lower index); a box is
/// suppressed when its IoU with an already kept box exceeds iou_thresh.
/// Returns kept indices in keep order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);

/// Wraps an angle into [-pi, pi).
double wrap_angle(double a);
/// (1 + cos(a - b)) / 2: 1 at agreement, 0 at opposite headings.
double orientation_similarity(double theta_a, double theta_b);
/// Uniform angular bin of theta among n bins centered at 2*pi*j/n.
int orientation_bin(double theta, int n_bins);

}  // namespace subcnn
