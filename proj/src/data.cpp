#include "subcnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace subcnn {

// ---------------------------------------------------------------------------
// Convex polygon helpers
// ---------------------------------------------------------------------------

double polygon_area(const Polygon& p) {
  double s = 0;
  int n = static_cast<int>(p.size());
  for (int i = 0; i < n; ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % n];
    s += a[0] * b[1] - b[0] * a[1];
  }
  return 0.5 * s;
}

Box polygon_bbox(const Polygon& p) {
  SUBCNN_CHECK(!p.empty(), "polygon bbox: empty polygon");
  Box b;
  b.x1 = b.x2 = p[0][0];
  b.y1 = b.y2 = p[0][1];
  for (const auto& v : p) {
    b.x1 = std::min(b.x1, v[0]);
    b.y1 = std::min(b.y1, v[1]);
    b.x2 = std::max(b.x2, v[0]);
    b.y2 = std::max(b.y2, v[1]);
  }
  return b;
}

Polygon rect_polygon(double x1, double y1, double x2, double y2) {
  return {{x1, y1}, {x2, y1}, {x2, y2}, {x1, y2}};
}

Polygon clip_polygon(const Polygon& subject, const Polygon& clip) {
  Polygon out = subject;
  int m = static_cast<int>(clip.size());
  for (int e = 0; e < m && out.size() >= 3; ++e) {
    const auto& A = clip[e];
    const auto& B = clip[(e + 1) % m];
    double ex = B[0] - A[0], ey = B[1] - A[1];
    Polygon in = std::move(out);
    out.clear();
    int k = static_cast<int>(in.size());
    for (int i = 0; i < k; ++i) {
      const auto& P = in[i];
      const auto& Q = in[(i + 1) % k];
      double dp = ex * (P[1] - A[1]) - ey * (P[0] - A[0]);
      double dq = ex * (Q[1] - A[1]) - ey * (Q[0] - A[0]);
      if (dp >= 0) out.push_back(P);
      if ((dp >= 0) != (dq >= 0)) {
        double t = dp / (dp - dq);
        out.push_back({P[0] + t * (Q[0] - P[0]), P[1] + t * (Q[1] - P[1])});
      }
    }
  }
  if (out.size() < 3) out.clear();
  return out;
}

double occluded_fraction(const Polygon& p, const std::vector<Polygon>& occluders) {
  double base = std::abs(polygon_area(p));
  SUBCNN_CHECK(base > 0, "occluded fraction: degenerate polygon");
  // Keep only occluders that actually intersect p; precompute p ∩ O.
  std::vector<Polygon> regions;  // p ∩ O_t, convex
  std::vector<const Polygon*> occ;
  for (const auto& o : occluders) {
    Polygon q = clip_polygon(p, o);
    if (!q.empty() && std::abs(polygon_area(q)) > 1e-12) {
      regions.push_back(std::move(q));
      occ.push_back(&o);
    }
  }
  int m = static_cast<int>(regions.size());
  SUBCNN_CHECK(m <= 20, "occluded fraction: too many overlapping occluders (%d)", m);
  double covered = 0;
  for (unsigned mask = 1; mask < (1u << m); ++mask) {
    int first = -1, bits = 0;
    for (int t = 0; t < m; ++t)
      if (mask & (1u << t)) {
        if (first < 0) first = t;
        ++bits;
      }
    Polygon q = regions[first];
    for (int t = first + 1; t < m && !q.empty(); ++t)
      if (mask & (1u << t)) q = clip_polygon(q, *occ[t]);
    if (q.empty()) continue;
    double area = std::abs(polygon_area(q));
    covered += (bits % 2 ? 1.0 : -1.0) * area;
  }
  return std::clamp(covered / base, 0.0, 1.0);
}

Polygon glyph_polygon(int class_id) {
  switch (class_id) {
    case 1:  // triangle: isoceles, apex toward +x
      return {{0.55, 0.0}, {-0.45, 0.38}, {-0.45, -0.38}};
    case 2: {  // ellipse: egg-shaped oval, fatter toward +x (limaçon r=a+b·cosφ,
               // convex since a ≥ 2b)
      Polygon p;
      const int kVerts = 40;
      for (int k = 0; k < kVerts; ++k) {
        double phi = 2 * M_PI * k / kVerts;
        double r = 0.5 * (1.0 + 0.35 * std::cos(phi));
        p.push_back({r * std::cos(phi), r * std::sin(phi)});
      }
      return p;
    }
    case 3:  // bar: elongated trapezoid, tapering toward +x
      return {{0.5, 0.17}, {-0.5, 0.26}, {-0.5, -0.26}, {0.5, -0.17}};
    default:
      fail(__FILE__, __LINE__, "glyph polygon: unknown class %d", class_id);
  }
}

Polygon transform_polygon(const Polygon& p, double stretch_x, double scale,
                          double theta, double cx, double cy) {
  SUBCNN_CHECK(stretch_x > 0 && scale > 0, "transform polygon: non-positive scaling");
  double c = std::cos(theta), s = std::sin(theta);
  Polygon out;
  out.reserve(p.size());
  for (const auto& v : p) {
    double x = scale * stretch_x * v[0];
    double y = scale * v[1];
    out.push_back({c * x - s * y + cx, s * x + c * y + cy});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

std::vector<std::string> default_class_names() { return {"triangle", "ellipse", "bar"}; }

void SceneSpec::validate() const {
  SUBCNN_CHECK(height >= 8 && width >= 8, "scene spec: image extents too small");
  SUBCNN_CHECK(min_objects >= 0 && max_objects >= min_objects && max_objects <= 16,
               "scene spec: bad object count range");
  SUBCNN_CHECK(min_height >= 4 && max_height >= min_height,
               "scene spec: bad object height range");
  SUBCNN_CHECK(aspect_jitter >= 0 && aspect_jitter < 0.5, "scene spec: bad aspect jitter");
  SUBCNN_CHECK(occlusion_prob >= 0 && occlusion_prob <= 1, "scene spec: bad occlusion prob");
  SUBCNN_CHECK(num_classes >= 1 && num_classes <= 3,
               "scene spec: %d classes requested, 3 glyph shapes available", num_classes);
  if (!class_weights.empty()) {
    SUBCNN_CHECK(static_cast<int>(class_weights.size()) == num_classes,
                 "scene spec: class weights size mismatch");
    double total = 0;
    for (double w : class_weights) {
      SUBCNN_CHECK(w >= 0, "scene spec: negative class weight");
      total += w;
    }
    SUBCNN_CHECK(total > 0, "scene spec: zero total class weight");
  }
}

namespace {

bool point_in_convex(const Polygon& p, double x, double y) {
  int n = static_cast<int>(p.size());
  for (int i = 0; i < n; ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % n];
    if ((b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) < -1e-12) return false;
  }
  return true;
}

double pixel_coverage(const Polygon& p, int x, int y) {
  if (point_in_convex(p, x, y) && point_in_convex(p, x + 1, y) &&
      point_in_convex(p, x + 1, y + 1) && point_in_convex(p, x, y + 1))
    return 1.0;
  Polygon q = clip_polygon(p, rect_polygon(x, y, x + 1, y + 1));
  if (q.empty()) return 0.0;
  return std::clamp(std::abs(polygon_area(q)), 0.0, 1.0);
}

void paint_background(Tensor& img, Rng& rng) {
  const int H = img.dim(0), W = img.dim(1);
  const int cells = 4;
  std::vector<std::array<double, 3>> nodes((cells + 1) * (cells + 1));
  for (auto& node : nodes) {
    double lum = rng.uniform(0.30, 0.60);
    for (int c = 0; c < 3; ++c) node[c] = lum + rng.uniform(-0.05, 0.05);
  }
  auto node_at = [&](int gy, int gx) -> const std::array<double, 3>& {
    return nodes[gy * (cells + 1) + gx];
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double fy = (y + 0.5) / H * cells, fx = (x + 0.5) / W * cells;
      int gy = std::min(static_cast<int>(fy), cells - 1);
      int gx = std::min(static_cast<int>(fx), cells - 1);
      double ty = fy - gy, tx = fx - gx;
      double jitter = rng.uniform(-0.015, 0.015);
      for (int c = 0; c < 3; ++c) {
        double v = (1 - ty) * ((1 - tx) * node_at(gy, gx)[c] + tx * node_at(gy, gx + 1)[c]) +
                   ty * ((1 - tx) * node_at(gy + 1, gx)[c] + tx * node_at(gy + 1, gx + 1)[c]);
        img.at(y, x, c) = static_cast<float>(std::clamp(v + jitter, 0.0, 1.0));
      }
    }
}

int sample_class(Rng& rng, int num_classes, const std::vector<double>& weights) {
  if (weights.empty()) return rng.uniform_int(1, num_classes);
  double total = 0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total, cum = 0;
  for (int c = 0; c < num_classes; ++c) {
    cum += weights[c];
    if (u < cum) return c + 1;
  }
  return num_classes;
}

struct PlacedObject {
  int class_id;
  double theta;
  double cx, cy;
  std::array<double, 3> color;
  Polygon poly;
};

void paint_object(Tensor& img, const PlacedObject& obj) {
  const int H = img.dim(0), W = img.dim(1);
  // Brightness rises toward the facing direction so orientation is visible
  // even for the near-symmetric shapes.
  double ct = std::cos(obj.theta), st = std::sin(obj.theta);
  double reach = 1e-9;
  for (const auto& v : obj.poly)
    reach = std::max(reach, (v[0] - obj.cx) * ct + (v[1] - obj.cy) * st);
  Box bb = polygon_bbox(obj.poly);
  int x_lo = std::max(0, static_cast<int>(std::floor(bb.x1)));
  int y_lo = std::max(0, static_cast<int>(std::floor(bb.y1)));
  int x_hi = std::min(W - 1, static_cast<int>(std::ceil(bb.x2)));
  int y_hi = std::min(H - 1, static_cast<int>(std::ceil(bb.y2)));
  for (int y = y_lo; y <= y_hi; ++y)
    for (int x = x_lo; x <= x_hi; ++x) {
      double cov = pixel_coverage(obj.poly, x, y);
      if (cov <= 0) continue;
      double d = (x + 0.5 - obj.cx) * ct + (y + 0.5 - obj.cy) * st;
      double m = 1.0 + 0.25 * std::clamp(d / reach, -1.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double glyph = std::clamp(obj.color[c] * m, 0.0, 1.0);
        img.at(y, x, c) = static_cast<float>(img.at(y, x, c) * (1.0 - cov) + glyph * cov);
      }
    }
}

const std::array<double, 3> kClassColors[3] = {
    {0.78, 0.32, 0.30}, {0.30, 0.72, 0.36}, {0.32, 0.42, 0.80}};

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Scene scene;
  scene.image = Tensor::zeros({spec.height, spec.width, 3});
  paint_background(scene.image, rng);

  const double W = spec.width, H = spec.height;
  const Polygon img_rect = rect_polygon(0, 0, W, H);
  int want = rng.uniform_int(spec.min_objects, spec.max_objects);
  std::vector<PlacedObject> placed;
  const int kAttempts = 40;
  for (int obj_i = 0; obj_i < want; ++obj_i) {
    int class_id = sample_class(rng, spec.num_classes, spec.class_weights);
    double theta = wrap_angle(rng.uniform(-M_PI, M_PI));
    double target_h = rng.uniform(spec.min_height, spec.max_height);
    double stretch = 1.0 + spec.aspect_jitter * rng.uniform(-1.0, 1.0);
    std::array<double, 3> color;
    for (int c = 0; c < 3; ++c)
      color[c] = std::clamp(kClassColors[class_id - 1][c] + rng.uniform(-0.08, 0.08), 0.05, 0.95);
    bool allow_overlap = rng.uniform() < spec.occlusion_prob;

    Polygon base = glyph_polygon(class_id);
    // Uniform scale chosen so the rotated bounding-box height hits target_h.
    Polygon probe = transform_polygon(base, stretch, 1.0, theta, 0.0, 0.0);
    double unit_h = polygon_bbox(probe).h();
    double scale = target_h / unit_h;
    double full_area = std::abs(polygon_area(probe)) * scale * scale;

    bool ok = false;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      double cx = rng.uniform(-0.05 * W, 1.05 * W);
      double cy = rng.uniform(-0.05 * H, 1.05 * H);
      Polygon poly = transform_polygon(base, stretch, scale, theta, cx, cy);
      Polygon visible = clip_polygon(poly, img_rect);
      double vis_frac = visible.empty() ? 0.0 : std::abs(polygon_area(visible)) / full_area;
      if (vis_frac < 0.25) continue;
      if (!allow_overlap) {
        Box nb = polygon_bbox(poly);
        bool crowded = false;
        for (const auto& other : placed)
          if (iou(nb, polygon_bbox(other.poly)) >= 0.1) {
            crowded = true;
            break;
          }
        if (crowded) continue;
      }
      placed.push_back({class_id, theta, cx, cy, color, std::move(poly)});
      ok = true;
      break;
    }
    if (!ok)
      SUBCNN_WARN("scene %llu: object %d unplaceable after %d attempts, continuing with fewer",
                  static_cast<unsigned long long>(spec.seed), obj_i, kAttempts);
  }

  for (const auto& obj : placed) paint_object(scene.image, obj);

  for (size_t i = 0; i < placed.size(); ++i) {
    std::vector<Polygon> occluders;
    for (size_t j = i + 1; j < placed.size(); ++j) occluders.push_back(placed[j].poly);
    Annotation ann;
    ann.class_id = placed[i].class_id;
    ann.theta = placed[i].theta;
    ann.occlusion = occluded_fraction(placed[i].poly, occluders);
    Polygon visible = clip_polygon(placed[i].poly, img_rect);
    double full = std::abs(polygon_area(placed[i].poly));
    double vis = visible.empty() ? 0.0 : std::abs(polygon_area(visible));
    ann.truncation = std::clamp(1.0 - vis / full, 0.0, 1.0);
    if (ann.truncation < 1e-9) ann.truncation = 0.0;
    ann.box = polygon_bbox(visible);
    scene.annotations.push_back(ann);
    scene.polygons.push_back(placed[i].poly);
  }
  return scene;
}

uint64_t derive_seed(uint64_t base, uint64_t index) {
  uint64_t z = base ^ (0x9E3779B97F4A7C15ULL * (index + 1));
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

// ---------------------------------------------------------------------------
// PPM (binary P6)
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& image) {
  SUBCNN_CHECK(image.rank() == 3 && image.dim(2) == 3, "write ppm: image must be (H,W,3)");
  const int H = image.dim(0), W = image.dim(1);
  std::ofstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "write ppm: cannot open %s", path.c_str());
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        long v = std::lround(static_cast<double>(image.at(y, x, c)) * 255.0);
        row[x * 3 + c] = static_cast<unsigned char>(std::clamp(v, 0L, 255L));
      }
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  SUBCNN_CHECK(f.good(), "write ppm: write failed for %s", path.c_str());
}

namespace {

int read_pnm_int(std::istream& f, const char* path) {
  // Skips whitespace and '#' comments, then reads a decimal integer.
  int ch = f.get();
  while (ch != EOF && (std::isspace(ch) || ch == '#')) {
    if (ch == '#')
      while (ch != EOF && ch != '\n') ch = f.get();
    ch = f.get();
  }
  SUBCNN_CHECK(ch != EOF && std::isdigit(ch), "read ppm: malformed header in %s", path);
  int v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    ch = f.get();
  }
  SUBCNN_CHECK(ch != EOF, "read ppm: truncated header in %s", path);
  f.unget();
  return v;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "read ppm: cannot open %s", path.c_str());
  char magic[2];
  f.read(magic, 2);
  SUBCNN_CHECK(f.good() && magic[0] == 'P' && magic[1] == '6', "read ppm: %s is not binary P6",
               path.c_str());
  int W = read_pnm_int(f, path.c_str());
  int H = read_pnm_int(f, path.c_str());
  int maxval = read_pnm_int(f, path.c_str());
  SUBCNN_CHECK(maxval == 255, "read ppm: %s has maxval %d, expected 255", path.c_str(), maxval);
  f.get();  // single whitespace byte before pixel data
  SUBCNN_CHECK(W > 0 && H > 0, "read ppm: bad extents in %s", path.c_str());
  std::vector<unsigned char> bytes(static_cast<size_t>(W) * H * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  SUBCNN_CHECK(f.gcount() == static_cast<std::streamsize>(bytes.size()),
               "read ppm: truncated pixel data in %s", path.c_str());
  Tensor img = Tensor::zeros({H, W, 3});
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

// ---------------------------------------------------------------------------
// Labels (JSON lines)
// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json annotation_to_json(const Annotation& a) {
  nlohmann::ordered_json j;
  j["class"] = a.class_id;
  j["box"] = {a.box.x1, a.box.y1, a.box.x2, a.box.y2};
  j["theta"] = a.theta;
  j["occlusion"] = a.occlusion;
  j["truncation"] = a.truncation;
  j["subcategory"] = a.subcategory;
  j["ignore"] = a.ignore;
  return j;
}

Annotation annotation_from_json(const nlohmann::json& j) {
  Annotation a;
  a.class_id = j.at("class").get<int>();
  auto box = j.at("box");
  SUBCNN_CHECK(box.is_array() && box.size() == 4, "labels: box must have 4 entries");
  a.box = Box{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(),
              box[3].get<double>()};
  a.theta = j.at("theta").get<double>();
  a.occlusion = j.at("occlusion").get<double>();
  a.truncation = j.at("truncation").get<double>();
  a.subcategory = j.value("subcategory", 0);
  a.ignore = j.value("ignore", false);
  return a;
}

}  // namespace

void save_labels(const std::string& path, const std::vector<ImageRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "save labels: cannot open %s", path.c_str());
  for (const auto& rec : records) {
    nlohmann::ordered_json j;
    j["image"] = rec.image;
    j["width"] = rec.width;
    j["height"] = rec.height;
    auto& arr = j["objects"] = nlohmann::ordered_json::array();
    for (const auto& a : rec.objects) arr.push_back(annotation_to_json(a));
    f << j.dump() << "\n";
  }
  SUBCNN_CHECK(f.good(), "save labels: write failed for %s", path.c_str());
}

std::vector<ImageRecord> load_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "load labels: cannot open %s", path.c_str());
  std::vector<ImageRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      fail(__FILE__, __LINE__, "load labels: %s line %d: %s", path.c_str(), line_no, e.what());
    }
    ImageRecord rec;
    rec.image = j.at("image").get<std::string>();
    rec.width = j.at("width").get<int>();
    rec.height = j.at("height").get<int>();
    for (const auto& ja : j.at("objects")) rec.objects.push_back(annotation_from_json(ja));
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ImageRecord> generate_dataset(const std::string& root, const SceneSpec& spec,
                                          int count, int threads) {
  spec.validate();
  SUBCNN_CHECK(count >= 0, "generate dataset: negative count");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  std::vector<ImageRecord> records(count);
  parallel_for(count, threads, [&](int64_t i) {
    SceneSpec s = spec;
    s.seed = derive_seed(spec.seed, static_cast<uint64_t>(i));
    Scene scene = generate_scene(s);
    char name[64];
    std::snprintf(name, sizeof(name), "images/img_%05d.ppm", static_cast<int>(i));
    write_ppm((fs::path(root) / name).string(), scene.image);
    records[i].image = name;
    records[i].width = spec.width;
    records[i].height = spec.height;
    records[i].objects = std::move(scene.annotations);
  });
  save_labels((fs::path(root) / "labels.jsonl").string(), records);
  return records;
}

// ---------------------------------------------------------------------------
// KITTI label text format
// ---------------------------------------------------------------------------

namespace {

double parse_double(const std::string& tok, int line_no, const char* field) {
  char* end = nullptr;
  double v = std::strtod(tok.c_str(), &end);
  SUBCNN_CHECK(end == tok.c_str() + tok.size() && !tok.empty(),
               "kitti labels line %d: cannot parse %s value '%s'", line_no, field, tok.c_str());
  return v;
}

int parse_int(const std::string& tok, int line_no, const char* field) {
  char* end = nullptr;
  long v = std::strtol(tok.c_str(), &end, 10);
  SUBCNN_CHECK(end == tok.c_str() + tok.size() && !tok.empty(),
               "kitti labels line %d: cannot parse %s value '%s'", line_no, field, tok.c_str());
  return static_cast<int>(v);
}

}  // namespace

std::vector<KittiLabel> parse_kitti_labels(const std::string& text) {
  std::vector<KittiLabel> out;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    std::string t;
    while (ls >> t) tok.push_back(t);
    SUBCNN_CHECK(tok.size() == 15, "kitti labels line %d: expected 15 fields, got %d", line_no,
                 static_cast<int>(tok.size()));
    KittiLabel k;
    k.type = tok[0];
    k.truncated = parse_double(tok[1], line_no, "truncated");
    k.occluded = parse_int(tok[2], line_no, "occluded");
    k.alpha = parse_double(tok[3], line_no, "alpha");
    k.x1 = parse_double(tok[4], line_no, "x1");
    k.y1 = parse_double(tok[5], line_no, "y1");
    k.x2 = parse_double(tok[6], line_no, "x2");
    k.y2 = parse_double(tok[7], line_no, "y2");
    k.h = parse_double(tok[8], line_no, "h");
    k.w = parse_double(tok[9], line_no, "w");
    k.l = parse_double(tok[10], line_no, "l");
    k.X = parse_double(tok[11], line_no, "X");
    k.Y = parse_double(tok[12], line_no, "Y");
    k.Z = parse_double(tok[13], line_no, "Z");
    k.ry = parse_double(tok[14], line_no, "ry");
    out.push_back(std::move(k));
  }
  return out;
}

std::string serialize_kitti_labels(const std::vector<KittiLabel>& labels) {
  std::string out;
  char buf[512];
  for (const auto& k : labels) {
    std::snprintf(buf, sizeof(buf),
                  "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f\n",
                  k.type.c_str(), k.truncated, k.occluded, k.alpha, k.x1, k.y1, k.x2, k.y2, k.h,
                  k.w, k.l, k.X, k.Y, k.Z, k.ry);
    out += buf;
  }
  return out;
}

std::vector<Annotation> kitti_to_annotations(const std::vector<KittiLabel>& labels,
                                             const std::vector<std::string>& class_names) {
  std::vector<Annotation> out;
  for (const auto& k : labels) {
    Annotation a;
    a.box = Box{k.x1, k.y1, k.x2, k.y2};
    a.theta = wrap_angle(k.ry);
    a.truncation = std::clamp(k.truncated, 0.0, 1.0);
    switch (k.occluded) {  // devkit visibility levels -> difficulty-aligned fractions
      case 0: a.occlusion = 0.0; break;
      case 1: a.occlusion = 0.3; break;
      case 2: a.occlusion = 0.5; break;
      default: a.occlusion = 1.0; break;
    }
    auto it = std::find(class_names.begin(), class_names.end(), k.type);
    if (k.type == "DontCare" || it == class_names.end()) {
      a.class_id = 0;
      a.ignore = true;
    } else {
      a.class_id = static_cast<int>(it - class_names.begin()) + 1;
    }
    out.push_back(a);
  }
  return out;
}

}  // namespace subcnn
