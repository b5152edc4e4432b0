#include "subcnn/subcategory.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "subcnn/geometry.hpp"

namespace subcnn {

const SubcategoryEntry& SubcategoryTable::entry(int id) const {
  SUBCNN_CHECK(id >= 1 && id <= K(), "subcategory table: unknown id %d", id);
  return entries[id - 1];
}

int SubcategoryTable::class_of(int id) const {
  if (id == 0) return 0;
  return entry(id).class_id;
}

std::vector<int> SubcategoryTable::ids_of_class(int class_id) const {
  std::vector<int> ids;
  for (const auto& e : entries)
    if (e.class_id == class_id) ids.push_back(e.id);
  return ids;
}

void SubcategoryTable::validate() const {
  SUBCNN_CHECK(!class_names.empty(), "subcategory table: no classes");
  std::vector<int> per_class(class_names.size() + 1, 0);
  for (int i = 0; i < K(); ++i) {
    SUBCNN_CHECK(entries[i].id == i + 1, "subcategory table: ids not dense (entry %d)", i);
    SUBCNN_CHECK(entries[i].class_id >= 1 && entries[i].class_id <= num_classes(),
                 "subcategory table: entry %d has bad class %d", i, entries[i].class_id);
    per_class[entries[i].class_id]++;
  }
  for (int c = 1; c <= num_classes(); ++c)
    SUBCNN_CHECK(per_class[c] >= 1, "subcategory table: class %d has no subcategories", c);
}

std::string SubcategoryTable::to_json() const {
  nlohmann::ordered_json j;
  j["K"] = K();
  j["classes"] = class_names;
  auto& arr = j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json je;
    je["id"] = e.id;
    je["class"] = e.class_id;
    je["theta"] = e.theta;
    je["members"] = e.member_count;
    arr.push_back(je);
  }
  return j.dump(2) + "\n";
}

SubcategoryTable SubcategoryTable::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SubcategoryTable t;
  t.class_names = j.at("classes").get<std::vector<std::string>>();
  for (const auto& je : j.at("entries")) {
    SubcategoryEntry e;
    e.id = je.at("id").get<int>();
    e.class_id = je.at("class").get<int>();
    e.theta = je.at("theta").get<double>();
    e.member_count = je.value("members", 0);
    t.entries.push_back(e);
  }
  SUBCNN_CHECK(j.at("K").get<int>() == t.K(), "subcategory table: K != |entries|");
  t.validate();
  return t;
}

SubcategoryTable orientation_subcategories(const std::vector<std::string>& class_names,
                                           const std::vector<std::vector<double>>& thetas,
                                           int bins) {
  SUBCNN_CHECK(bins >= 1, "orientation subcategories: bins < 1");
  SUBCNN_CHECK(thetas.size() == class_names.size(),
               "orientation subcategories: one theta list per class expected");
  SubcategoryTable t;
  t.class_names = class_names;
  for (int c = 1; c <= static_cast<int>(class_names.size()); ++c)
    for (int b = 0; b < bins; ++b) {
      SubcategoryEntry e;
      e.id = (c - 1) * bins + b + 1;
      e.class_id = c;
      e.theta = wrap_angle(2 * M_PI * b / bins);
      t.entries.push_back(e);
    }
  for (size_t c = 0; c < thetas.size(); ++c)
    for (double th : thetas[c]) {
      int b = orientation_bin(th, bins);
      t.entries[c * bins + b].member_count++;
    }
  t.validate();
  return t;
}

int orientation_subcategory_id(const SubcategoryTable& table, int class_id, double theta) {
  SUBCNN_CHECK(class_id >= 1 && class_id <= table.num_classes(),
               "orientation subcategory: bad class %d", class_id);
  int bins = table.K() / table.num_classes();
  return (class_id - 1) * bins + orientation_bin(theta, bins) + 1;
}

SimilarityMatrix similarity_from_points(const std::vector<std::vector<double>>& points) {
  int n = static_cast<int>(points.size());
  SUBCNN_CHECK(n >= 1, "similarity: no points");
  SimilarityMatrix S;
  S.n = n;
  S.s.assign(static_cast<size_t>(n) * n, 0.0);
  std::vector<double> offdiag;
  offdiag.reserve(static_cast<size_t>(n) * (n - 1));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      SUBCNN_CHECK(points[i].size() == points[j].size(), "similarity: ragged points");
      double d2 = 0;
      for (size_t k = 0; k < points[i].size(); ++k) {
        double d = points[i][k] - points[j][k];
        d2 += d * d;
      }
      S.at(i, j) = -d2;
      offdiag.push_back(-d2);
    }
  double pref = 0.0;
  if (!offdiag.empty()) {
    // Median off-diagonal similarity, the standard preference choice.
    std::sort(offdiag.begin(), offdiag.end());
    size_t m = offdiag.size();
    pref = m % 2 ? offdiag[m / 2] : 0.5 * (offdiag[m / 2 - 1] + offdiag[m / 2]);
  }
  for (int i = 0; i < n; ++i) S.at(i, i) = pref;
  return S;
}

namespace {

std::vector<int> current_exemplars(const std::vector<double>& r, const std::vector<double>& a,
                                   int n) {
  std::vector<int> ex;
  for (int k = 0; k < n; ++k)
    if (r[static_cast<size_t>(k) * n + k] + a[static_cast<size_t>(k) * n + k] > 0)
      ex.push_back(k);
  return ex;
}

}  // namespace

ApResult affinity_propagation(const SimilarityMatrix& S, double damping, int max_iter,
                              int convergence_window) {
  SUBCNN_CHECK(damping >= 0.5 && damping < 1.0, "affinity propagation: damping outside [0.5,1)");
  SUBCNN_CHECK(max_iter >= 1 && convergence_window >= 1, "affinity propagation: bad iteration caps");
  const int n = S.n;
  SUBCNN_CHECK(n >= 1 && static_cast<int>(S.s.size()) == n * n,
               "affinity propagation: malformed similarity matrix");
  for (double v : S.s) SUBCNN_CHECK(std::isfinite(v), "affinity propagation: non-finite similarity");

  ApResult res;
  if (n == 1) {
    res.exemplars = {0};
    res.assignment = {0};
    res.converged = true;
    return res;
  }

  // Degeneracy-breaking jitter, as in the reference implementations of the
  // algorithm: plain message passing can lock into symmetric oscillations
  // (whole near-equivalent groups flipping exemplar status in phase), and a
  // tiny perturbation lets the dynamics break that symmetry. The perturbation
  // is scaled by the similarity range so that shifting every similarity by a
  // constant perturbs the problem identically, and drawn from a fixed-seed
  // generator so results stay reproducible.
  std::vector<double> s(S.s);
  {
    auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    double jitter = (*hi - *lo) * 1e-12;
    if (jitter > 0) {
      Rng jrng(0x9a75c2e1d4b80f63ull);
      for (double& v : s) v += jitter * jrng.gaussian();
    }
  }
  auto sim = [&s, n](int i, int k) { return s[static_cast<size_t>(i) * n + k]; };

  std::vector<double> r(static_cast<size_t>(n) * n, 0.0), a(static_cast<size_t>(n) * n, 0.0);
  std::vector<int> stable_ex;
  int stable_run = 0;
  auto idx = [n](int i, int k) { return static_cast<size_t>(i) * n + k; };

  for (int iter = 0; iter < max_iter; ++iter) {
    // Responsibilities: r(i,k) <- s(i,k) - max_{k' != k} (a(i,k') + s(i,k')).
    for (int i = 0; i < n; ++i) {
      double best = -1e300, second = -1e300;
      int best_k = -1;
      for (int k = 0; k < n; ++k) {
        double v = a[idx(i, k)] + sim(i, k);
        if (v > best) {
          second = best;
          best = v;
          best_k = k;
        } else if (v > second) {
          second = v;
        }
      }
      for (int k = 0; k < n; ++k) {
        double cap = k == best_k ? second : best;
        r[idx(i, k)] = damping * r[idx(i, k)] + (1 - damping) * (sim(i, k) - cap);
      }
    }
    // Availabilities: a(i,k) <- min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)));
    // a(k,k) <- sum_{i' != k} max(0, r(i',k)).
    for (int k = 0; k < n; ++k) {
      double pos_sum = 0;
      for (int i = 0; i < n; ++i)
        if (i != k) pos_sum += std::max(0.0, r[idx(i, k)]);
      for (int i = 0; i < n; ++i) {
        double fresh;
        if (i == k) {
          fresh = pos_sum;
        } else {
          fresh = r[idx(k, k)] + pos_sum - std::max(0.0, r[idx(i, k)]);
          fresh = std::min(0.0, fresh);
        }
        a[idx(i, k)] = damping * a[idx(i, k)] + (1 - damping) * fresh;
      }
    }

    auto ex = current_exemplars(r, a, n);
    res.iterations = iter + 1;
    if (!ex.empty() && ex == stable_ex) {
      if (++stable_run >= convergence_window) {
        res.converged = true;
        break;
      }
    } else {
      stable_ex = ex;
      stable_run = 0;
    }
  }

  res.exemplars = current_exemplars(r, a, n);
  if (res.exemplars.empty()) {
    // Fully degenerate case (e.g. all-identical points): fall back to the
    // best self-belief, which selects a single exemplar deterministically.
    int best = 0;
    for (int k = 1; k < n; ++k)
      if (r[idx(k, k)] + a[idx(k, k)] > r[idx(best, best)] + a[idx(best, best)]) best = k;
    res.exemplars = {best};
  }
  if (!res.converged)
    SUBCNN_WARN("affinity propagation did not converge in %d iterations (%d exemplars)",
                max_iter, static_cast<int>(res.exemplars.size()));

  res.assignment.assign(n, -1);
  for (int i = 0; i < n; ++i) {
    int best = res.exemplars[0];
    for (int k : res.exemplars)
      if (S.at(i, k) > S.at(i, best)) best = k;
    res.assignment[i] = best;
  }
  for (int k : res.exemplars) res.assignment[k] = k;  // exemplars own themselves
  return res;
}

double transfer_orientation(const SubcategoryTable& table, int subcategory_id) {
  SUBCNN_CHECK(subcategory_id != 0, "transfer: background carries no orientation");
  return table.entry(subcategory_id).theta;
}

}  // namespace subcnn
