#pragma once

#include <string>
#include <vector>

#include "subcnn/common.hpp"

namespace subcnn {

/// One subcategory: a pose bin (or appearance cluster) of one class.
struct SubcategoryEntry {
  int id = 0;        // dense in [1..K]; 0 is reserved for background
  int class_id = 0;  // 1..K'
  double theta = 0;  // orientation bin center, [-pi, pi)
  int member_count = 0;
};

/// The single source of the subcategory -> class map. K aggregates the
/// subcategories of all classes; class ids run 1..K' with 0 = background.
struct SubcategoryTable {
  std::vector<std::string> class_names;  // index 0 -> class id 1
  std::vector<SubcategoryEntry> entries;

  int K() const { return static_cast<int>(entries.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  const SubcategoryEntry& entry(int id) const;
  /// Class of a subcategory id; id 0 -> class 0 (background).
  int class_of(int id) const;
  std::vector<int> ids_of_class(int class_id) const;
  void validate() const;

  std::string to_json() const;
  static SubcategoryTable from_json(const std::string& text);
};

/// Pose-bin subcategories: per class, `bins` uniform angular bins centered at
/// 2*pi*j/bins. Returns the table; thetas[c] lists ground-truth orientations
/// of class c+1 (used only for member counts).
SubcategoryTable orientation_subcategories(const std::vector<std::string>& class_names,
                                           const std::vector<std::vector<double>>& thetas,
                                           int bins);

/// Subcategory id of (class, theta) under the orientation-bin convention.
int orientation_subcategory_id(const SubcategoryTable& table, int class_id, double theta);

/// n x n similarities; off-diagonal symmetric, diagonal carries preferences.
struct SimilarityMatrix {
  int n = 0;
  std::vector<double> s;  // row-major n*n
  double& at(int i, int j) { return s[static_cast<size_t>(i) * n + j]; }
  double at(int i, int j) const { return s[static_cast<size_t>(i) * n + j]; }
};

/// Negative squared Euclidean distances between rows of points (n x d),
/// preferences set to the median off-diagonal similarity.
SimilarityMatrix similarity_from_points(const std::vector<std::vector<double>>& points);

struct ApResult {
  std::vector<int> exemplars;   // ascending indices
  std::vector<int> assignment;  // point -> exemplar index (into original points)
  bool converged = false;
  int iterations = 0;
};

/// Frey-Dueck responsibility/availability message passing with damping.
/// Exemplars are the points with r(k,k)+a(k,k) > 0 once the exemplar set is
/// stable for `convergence_window` iterations; everyone is assigned to the
/// exemplar maximizing s(i,k). Non-convergence returns best-so-far with
/// converged=false and a warning.
ApResult affinity_propagation(const SimilarityMatrix& S, double damping = 0.5,
                              int max_iter = 200, int convergence_window = 15);

/// Orientation metadata carried by the subcategory, copied onto a detection.
/// Background (id 0) and unknown ids are errors.
double transfer_orientation(const SubcategoryTable& table, int subcategory_id);

}  // namespace subcnn
