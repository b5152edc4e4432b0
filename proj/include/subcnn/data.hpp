#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "subcnn/common.hpp"
#include "subcnn/geometry.hpp"
#include "subcnn/tensor.hpp"

namespace subcnn {

// ---------------------------------------------------------------------------
// Ground-truth annotation
// ---------------------------------------------------------------------------

struct Annotation {
  int class_id = 0;       // 1-based; 0 only valid together with ignore
  Box box;                // axis-aligned, image pixels, clipped to the frame
  double theta = 0.0;     // orientation in [-pi, pi)
  double occlusion = 0.0; // fraction of the object covered by later objects
  double truncation = 0.0;// fraction of the object outside the image frame
  int subcategory = 0;    // optional; 0 = unassigned
  bool ignore = false;    // excluded from evaluation (counts neither TP nor FP)
};

// ---------------------------------------------------------------------------
// Convex polygon helpers (exposed so tests can cross-check scene geometry)
// ---------------------------------------------------------------------------

using Polygon = std::vector<std::array<double, 2>>;  // counter-clockwise

double polygon_area(const Polygon& p);               // signed; CCW positive
Box polygon_bbox(const Polygon& p);
Polygon rect_polygon(double x1, double y1, double x2, double y2);
// Clips a convex subject polygon to a convex clip region (both CCW).
Polygon clip_polygon(const Polygon& subject, const Polygon& clip);
// Area of p covered by the union of the given convex occluders, as a fraction
// of p's own area (inclusion-exclusion over occluder subsets).
double occluded_fraction(const Polygon& p, const std::vector<Polygon>& occluders);

// Unit glyph outline for a class (1-based), centered at the origin and facing
// +x. Each class has a distinct, orientation-identifiable convex shape.
Polygon glyph_polygon(int class_id);
// stretch_x scales the glyph's local x axis before rotation; scale is applied
// uniformly afterwards, then rotation by theta and translation to (cx, cy).
Polygon transform_polygon(const Polygon& p, double stretch_x, double scale,
                          double theta, double cx, double cy);

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

struct SceneSpec {
  uint64_t seed = 0;
  int height = 80;
  int width = 80;
  int min_objects = 1;
  int max_objects = 4;
  double min_height = 16.0;   // sampled object bounding-box height range (px)
  double max_height = 48.0;
  double aspect_jitter = 0.15;    // relative stretch of the glyph's local x axis
  double occlusion_prob = 0.3;    // chance a new object is allowed to overlap
  int num_classes = 3;
  std::vector<double> class_weights;  // optional; empty = uniform
  void validate() const;
};

struct Scene {
  Tensor image;                      // (H, W, 3) float in [0, 1]
  std::vector<Annotation> annotations;
  std::vector<Polygon> polygons;     // full outlines, draw order (later on top)
};

// Default class names for the synthetic glyph classes.
std::vector<std::string> default_class_names();

Scene generate_scene(const SceneSpec& spec);

// Stable per-index seed derivation so image i is reproducible in isolation.
uint64_t derive_seed(uint64_t base, uint64_t index);

// ---------------------------------------------------------------------------
// Dataset on disk: images/ (binary PPM), labels.jsonl
// ---------------------------------------------------------------------------

struct ImageRecord {
  std::string image;  // path relative to the dataset root
  int width = 0;
  int height = 0;
  std::vector<Annotation> objects;
};

void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

void save_labels(const std::string& path, const std::vector<ImageRecord>& records);
std::vector<ImageRecord> load_labels(const std::string& path);

// Generates `count` scenes with per-index seeds derived from spec.seed and
// writes images/img_%05d.ppm plus labels.jsonl under root.
std::vector<ImageRecord> generate_dataset(const std::string& root, const SceneSpec& spec,
                                          int count, int threads = 1);

// ---------------------------------------------------------------------------
// KITTI object-label text format
// ---------------------------------------------------------------------------

struct KittiLabel {
  std::string type;
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  double h = 0.0, w = 0.0, l = 0.0;
  double X = 0.0, Y = 0.0, Z = 0.0;
  double ry = 0.0;
};

std::vector<KittiLabel> parse_kitti_labels(const std::string& text);
std::string serialize_kitti_labels(const std::vector<KittiLabel>& labels);

// Maps labels to annotations: class_id = 1-based index into class_names;
// unknown types and DontCare entries become ignore annotations. Orientation
// is taken from ry; the devkit's integer occlusion levels map to fractions
// aligned with the difficulty thresholds (0 -> 0.0, 1 -> 0.3, 2 -> 0.5,
// 3 -> 1.0).
std::vector<Annotation> kitti_to_annotations(const std::vector<KittiLabel>& labels,
                                             const std::vector<std::string>& class_names);

}  // namespace subcnn
