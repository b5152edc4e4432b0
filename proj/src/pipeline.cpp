#include "subcnn/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "subcnn/detnet.hpp"
#include "subcnn/rpn.hpp"
#include "subcnn/subcategory.hpp"

namespace subcnn {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

// One row per configuration key: readers and writers stay in lockstep and the
// unknown-key check falls out of the same table.
template <typename Fn>
void for_each_train_key(TrainConfig& t, Fn&& fn) {
  fn("learning_rate", t.learning_rate);
  fn("momentum", t.momentum);
  fn("weight_decay", t.weight_decay);
  fn("iterations", t.iterations);
  fn("lambda", t.lambda);
  fn("lambda1", t.lambda1);
  fn("lambda2", t.lambda2);
  fn("rpn_rois", t.rpn_rois);
  fn("rpn_positive_fraction", t.rpn_positive_fraction);
  fn("rpn_iou_pos", t.rpn_iou_pos);
  fn("rpn_iou_neg", t.rpn_iou_neg);
  fn("det_images", t.det_images);
  fn("det_rois", t.det_rois);
  fn("det_positive_fraction", t.det_positive_fraction);
  fn("det_iou_pos", t.det_iou_pos);
  fn("log_every", t.log_every);
}

template <typename Fn>
void for_each_key(RunConfig& c, Fn&& fn) {
  fn("seed", c.seed);
  fn("threads", c.threads);
  fn("out", c.out);
  fn("dataset", c.dataset);
  fn("subcats", c.subcats);
  fn("rpn_model", c.rpn_model);
  fn("det_model", c.det_model);
  fn("proposals", c.proposals);
  fn("detections", c.detections);
  fn("images", c.images);
  fn("image_h", c.image_h);
  fn("image_w", c.image_w);
  fn("min_objects", c.min_objects);
  fn("max_objects", c.max_objects);
  fn("min_object_height", c.min_object_height);
  fn("max_object_height", c.max_object_height);
  fn("occlusion_prob", c.occlusion_prob);
  fn("classes", c.classes);
  fn("orientation_bins", c.orientation_bins);
  fn("scales", c.scales);
  fn("levels_between", c.levels_between);
  fn("aspect_ratios", c.aspect_ratios);
  fn("filter_size", c.filter_size);
  fn("backbone_c1", c.backbone_c1);
  fn("backbone_c2", c.backbone_c2);
  fn("hidden", c.hidden);
  fn("grid", c.grid);
  fn("proposals_per_image", c.proposals_per_image);
  fn("heat_keep", c.heat_keep);
  fn("proposal_nms_iou", c.proposal_nms_iou);
  fn("nms_iou", c.nms_iou);
  fn("score_thresh", c.score_thresh);
  fn("iou_thresh", c.iou_thresh);
  fn("n_views", c.n_views);
  fn("difficulty", c.difficulty);
}

void apply_object(RunConfig& cfg, const json& j) {
  SUBCNN_CHECK(j.is_object(), "config: top level must be a JSON object");
  std::set<std::string> known;
  for (const auto& item : j.items()) {
    bool used = false;
    auto reader = [&](const char* key, auto& field) {
      if (item.key() != key) return;
      try {
        field = item.value().get<std::decay_t<decltype(field)>>();
      } catch (const std::exception& e) {
        SUBCNN_CHECK(false, "config: bad value for '%s': %s", key, e.what());
      }
      used = true;
    };
    for_each_key(cfg, reader);
    if (item.key() == "train") {
      SUBCNN_CHECK(item.value().is_object(), "config: 'train' must be an object");
      for (const auto& t : item.value().items()) {
        bool tused = false;
        auto treader = [&](const char* key, auto& field) {
          if (t.key() != key) return;
          try {
            field = t.value().get<std::decay_t<decltype(field)>>();
          } catch (const std::exception& e) {
            SUBCNN_CHECK(false, "config: bad value for 'train.%s': %s", key, e.what());
          }
          tused = true;
        };
        for_each_train_key(cfg.train, treader);
        SUBCNN_CHECK(tused, "config: unknown key 'train.%s'", t.key().c_str());
      }
      used = true;
    }
    SUBCNN_CHECK(used, "config: unknown key '%s'", item.key().c_str());
  }
  (void)known;
}

std::string read_text_file(const std::string& path, const char* what) {
  std::ifstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "%s: cannot read %s", what, path.c_str());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string text) {
  if (text.empty() || text.back() != '\n') text += '\n';
  std::ofstream f(path, std::ios::binary);
  SUBCNN_CHECK(f.good(), "cannot write %s", path.c_str());
  f << text;
  SUBCNN_CHECK(f.good(), "write to %s failed", path.c_str());
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

void prepare_out(const RunConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out);
  write_text_file(cfg.out + "/config.json", run_config_to_json(cfg));
}

std::vector<std::string> class_names(const RunConfig& cfg) {
  return cfg.classes.empty() ? default_class_names() : cfg.classes;
}

const std::string& require_path(const std::string& path, const char* stage,
                                const char* key) {
  SUBCNN_CHECK(!path.empty(), "%s: configuration key '%s' is required", stage, key);
  return path;
}

std::vector<ImageRecord> load_dataset_records(const RunConfig& cfg,
                                              const char* stage) {
  const std::string& root = require_path(cfg.dataset, stage, "dataset");
  const std::string labels = root + "/labels.jsonl";
  SUBCNN_CHECK(std::filesystem::exists(labels), "%s: cannot read %s", stage,
               labels.c_str());
  return load_labels(labels);
}

SubcategoryTable load_table(const RunConfig& cfg, const char* stage) {
  const std::string& path = require_path(cfg.subcats, stage, "subcats");
  const SubcategoryTable table =
      SubcategoryTable::from_json(read_text_file(path, stage));
  table.validate();
  return table;
}

// Reads every image and stamps orientation subcategories on the labels.
std::vector<TrainSample> load_train_samples(const RunConfig& cfg,
                                            const std::vector<ImageRecord>& records,
                                            const SubcategoryTable& table) {
  std::vector<TrainSample> ds(records.size());
  parallel_for(static_cast<int64_t>(records.size()), cfg.threads, [&](int64_t i) {
    ds[static_cast<size_t>(i)].image =
        read_ppm(cfg.dataset + "/" + records[static_cast<size_t>(i)].image);
    ds[static_cast<size_t>(i)].annotations = records[static_cast<size_t>(i)].objects;
    assign_subcategories(ds[static_cast<size_t>(i)].annotations, table);
  });
  return ds;
}

std::vector<std::vector<Annotation>> ground_truth_by_image(
    const std::vector<ImageRecord>& records) {
  std::vector<std::vector<Annotation>> gts(records.size());
  for (size_t i = 0; i < records.size(); ++i) gts[i] = records[i].objects;
  return gts;
}

std::vector<Detection> proposals_as_detections(
    const std::vector<std::vector<Roi>>& per_image) {
  std::vector<Detection> out;
  for (size_t i = 0; i < per_image.size(); ++i) {
    for (const Roi& r : per_image[i]) {
      Detection d;
      d.image_id = static_cast<int>(i);
      d.class_id = 0;
      d.box = r.box;
      d.score = r.score;
      out.push_back(d);
    }
  }
  return out;
}

std::string sanitize_name(const std::string& name) {
  std::string out = name;
  for (char& ch : out) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '-' || ch == '_';
    if (!ok) ch = '_';
  }
  return out.empty() ? std::string("class") : out;
}

}  // namespace

void RunConfig::validate() const {
  SUBCNN_CHECK(threads >= 1, "config: threads must be >= 1");
  SUBCNN_CHECK(!out.empty(), "config: 'out' must not be empty");
  SUBCNN_CHECK(images >= 1, "config: images must be >= 1");
  SUBCNN_CHECK(image_h >= 16 && image_w >= 16,
               "config: image extents must be >= 16 px");
  SUBCNN_CHECK(min_objects >= 0 && max_objects >= min_objects,
               "config: need 0 <= min_objects <= max_objects");
  SUBCNN_CHECK(min_object_height > 0 && max_object_height >= min_object_height,
               "config: object height range is inverted");
  SUBCNN_CHECK(occlusion_prob >= 0 && occlusion_prob <= 1,
               "config: occlusion_prob out of [0,1]");
  SUBCNN_CHECK(orientation_bins >= 1, "config: orientation_bins must be >= 1");
  SUBCNN_CHECK(!scales.empty(), "config: scales must not be empty");
  for (double s : scales) SUBCNN_CHECK(s > 0, "config: scales must be positive");
  SUBCNN_CHECK(std::is_sorted(scales.begin(), scales.end()),
               "config: scales must ascend");
  SUBCNN_CHECK(levels_between >= 0, "config: levels_between must be >= 0");
  for (double a : aspect_ratios) {
    SUBCNN_CHECK(a > 0, "config: aspect ratios must be positive");
  }
  SUBCNN_CHECK(filter_size >= 1 && filter_size % 2 == 1,
               "config: filter_size must be odd and >= 1");
  SUBCNN_CHECK(backbone_c1 >= 1 && backbone_c2 >= 1,
               "config: backbone channels must be >= 1");
  SUBCNN_CHECK(hidden >= 1, "config: hidden must be >= 1");
  SUBCNN_CHECK(grid >= 1, "config: grid must be >= 1");
  SUBCNN_CHECK(proposals_per_image >= 1, "config: proposals_per_image must be >= 1");
  SUBCNN_CHECK(heat_keep >= 1, "config: heat_keep must be >= 1");
  SUBCNN_CHECK(proposal_nms_iou > 0 && proposal_nms_iou <= 1,
               "config: proposal_nms_iou out of (0,1]");
  SUBCNN_CHECK(nms_iou > 0 && nms_iou <= 1, "config: nms_iou out of (0,1]");
  SUBCNN_CHECK(score_thresh >= 0, "config: score_thresh must be >= 0");
  SUBCNN_CHECK(iou_thresh > 0 && iou_thresh <= 1, "config: iou_thresh out of (0,1]");
  SUBCNN_CHECK(n_views == 4 || n_views == 8 || n_views == 16 || n_views == 24,
               "config: n_views must be one of 4, 8, 16, 24");
  difficulty_from_name(difficulty);  // throws on anything unrecognized
  train.validate();
}

RunConfig run_config_from_json(const std::string& text) {
  RunConfig cfg;
  if (text.empty()) return cfg;
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    SUBCNN_CHECK(false, "config: %s", e.what());
  }
  apply_object(cfg, j);
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  ordered_json j;
  auto writer = [&j](const char* key, auto& field) { j[key] = field; };
  for_each_key(const_cast<RunConfig&>(cfg), writer);
  ordered_json t;
  auto twriter = [&t](const char* key, auto& field) { t[key] = field; };
  for_each_train_key(const_cast<RunConfig&>(cfg).train, twriter);
  j["train"] = t;
  return j.dump(2) + "\n";
}

void run_config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  SUBCNN_CHECK(!key.empty(), "config override: empty key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const std::exception&) {
    parsed = value;  // unquoted strings are taken literally
  }
  json patch;
  const size_t dot = key.find('.');
  if (dot == std::string::npos) {
    patch[key] = parsed;
  } else {
    patch[key.substr(0, dot)][key.substr(dot + 1)] = parsed;
  }
  apply_object(cfg, patch);
}

ScaleSet scale_set(const RunConfig& cfg) {
  ScaleSet ss;
  ss.computed = cfg.scales;
  ss.M = cfg.levels_between;
  ss.validate();
  return ss;
}

Difficulty difficulty_from_name(const std::string& name) {
  if (name == "easy") return Difficulty::kEasy;
  if (name == "moderate") return Difficulty::kModerate;
  if (name == "hard") return Difficulty::kHard;
  SUBCNN_CHECK(false, "unknown difficulty '%s' (easy|moderate|hard)", name.c_str());
  return Difficulty::kModerate;
}

std::vector<double> effective_aspect_ratios(const RunConfig& cfg) {
  return cfg.aspect_ratios.empty() ? kDefaultAspectRatios : cfg.aspect_ratios;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void run_gen_data(const RunConfig& cfg) {
  prepare_out(cfg);
  SceneSpec spec;
  spec.seed = cfg.seed;
  spec.height = cfg.image_h;
  spec.width = cfg.image_w;
  spec.min_objects = cfg.min_objects;
  spec.max_objects = cfg.max_objects;
  spec.min_height = cfg.min_object_height;
  spec.max_height = cfg.max_object_height;
  spec.occlusion_prob = cfg.occlusion_prob;
  spec.num_classes = static_cast<int>(class_names(cfg).size());
  generate_dataset(cfg.out, spec, cfg.images, cfg.threads);
}

void run_discover_subcats(const RunConfig& cfg) {
  prepare_out(cfg);
  const std::vector<ImageRecord> records =
      load_dataset_records(cfg, "discover-subcats");
  const std::vector<std::string> names = class_names(cfg);
  std::vector<std::vector<double>> thetas(names.size());
  for (const ImageRecord& rec : records) {
    for (const Annotation& a : rec.objects) {
      if (a.ignore) continue;
      SUBCNN_CHECK(a.class_id >= 1 && a.class_id <= static_cast<int>(names.size()),
                   "discover-subcats: class %d outside the %zu configured classes",
                   a.class_id, names.size());
      thetas[static_cast<size_t>(a.class_id - 1)].push_back(a.theta);
    }
  }
  const SubcategoryTable table =
      orientation_subcategories(names, thetas, cfg.orientation_bins);
  write_text_file(cfg.out + "/subcategories.json", table.to_json());
}

void run_train_rpn(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "train-rpn", "dataset");
  require_path(cfg.subcats, "train-rpn", "subcats");
  const SubcategoryTable table = load_table(cfg, "train-rpn");
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "train-rpn");
  const std::vector<TrainSample> ds = load_train_samples(cfg, records, table);
  const RpnModel init =
      init_rpn_model<float>(3, cfg.backbone_c1, cfg.backbone_c2, cfg.filter_size,
                            table, derive_seed(cfg.seed, 1));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 2);
  const RpnTrainResult r = train_rpn<float>(ds, scale_set(cfg), table, init, tc);
  if (r.aborted) {
    SUBCNN_WARN("train-rpn: run aborted after %d iterations; the checkpoint holds "
                "the last stable parameters",
                r.iterations_done);
  }
  save_rpn_model(cfg.out + "/rpn_model", r.model);
  write_text_file(cfg.out + "/rpn_loss.csv", loss_log_to_csv(r.log));
}

void run_propose(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "propose", "dataset");
  const RpnModel model =
      load_rpn_model(require_path(cfg.rpn_model, "propose", "rpn_model"));
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "propose");
  const ScaleSet ss = scale_set(cfg);
  const std::vector<double> ratios = effective_aspect_ratios(cfg);
  std::vector<std::vector<Roi>> per_image(records.size());
  parallel_for(static_cast<int64_t>(records.size()), cfg.threads, [&](int64_t i) {
    const Tensor image =
        read_ppm(cfg.dataset + "/" + records[static_cast<size_t>(i)].image);
    const FeaturePyramid pyr = build_feature_pyramid(image, model.backbone, ss);
    const HeatMapStack heat = subcategory_conv(pyr, model.params.subcat);
    const double thr = percentile_threshold(heat, cfg.heat_keep);
    const std::vector<Roi> rois =
        generate_rois_test(heat, thr, ratios, cfg.heat_keep);
    per_image[static_cast<size_t>(i)] =
        select_proposals(rois, cfg.proposal_nms_iou, cfg.proposals_per_image);
  });
  write_text_file(cfg.out + "/proposals.csv", proposals_to_csv(per_image));
}

void run_train_det(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "train-det", "dataset");
  require_path(cfg.subcats, "train-det", "subcats");
  require_path(cfg.rpn_model, "train-det", "rpn_model");
  require_path(cfg.proposals, "train-det", "proposals");
  const SubcategoryTable table = load_table(cfg, "train-det");
  const RpnModel rpn =
      load_rpn_model(require_path(cfg.rpn_model, "train-det", "rpn_model"));
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "train-det");
  const std::vector<TrainSample> ds = load_train_samples(cfg, records, table);
  std::vector<std::vector<Roi>> props = proposals_from_csv(read_text_file(
      require_path(cfg.proposals, "train-det", "proposals"), "train-det"));
  SUBCNN_CHECK(props.size() <= ds.size(),
               "train-det: proposals reference %zu images but the dataset has %zu",
               props.size(), ds.size());
  props.resize(ds.size());  // trailing images simply have no proposals
  const DetParams init = init_det_params<float>(
      cfg.backbone_c2, cfg.grid, cfg.hidden, table, derive_seed(cfg.seed, 3));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 4);
  const DetTrainResult r =
      train_detector<float>(ds, props, rpn.backbone, scale_set(cfg), table, init, tc);
  if (r.aborted) {
    SUBCNN_WARN("train-det: run aborted after %d iterations; the checkpoint holds "
                "the last stable parameters",
                r.iterations_done);
  }
  save_det_params(cfg.out + "/det_model", r.params);
  write_text_file(cfg.out + "/det_loss.csv", loss_log_to_csv(r.log));
}

void run_detect(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "detect", "dataset");
  require_path(cfg.subcats, "detect", "subcats");
  require_path(cfg.rpn_model, "detect", "rpn_model");
  require_path(cfg.det_model, "detect", "det_model");
  const SubcategoryTable table = load_table(cfg, "detect");
  const RpnModel rpn =
      load_rpn_model(require_path(cfg.rpn_model, "detect", "rpn_model"));
  const DetParams det =
      load_det_params(require_path(cfg.det_model, "detect", "det_model"));
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "detect");
  const ScaleSet ss = scale_set(cfg);
  DetectConfig base;
  base.aspect_ratios = effective_aspect_ratios(cfg);
  base.heat_keep = cfg.heat_keep;
  base.proposal_nms_iou = cfg.proposal_nms_iou;
  base.proposal_budget = cfg.proposals_per_image;
  base.nms_iou = cfg.nms_iou;
  base.score_thresh = cfg.score_thresh;
  std::vector<std::vector<Detection>> per_image(records.size());
  parallel_for(static_cast<int64_t>(records.size()), cfg.threads, [&](int64_t i) {
    DetectConfig dc = base;
    dc.image_id = static_cast<int>(i);
    const Tensor image =
        read_ppm(cfg.dataset + "/" + records[static_cast<size_t>(i)].image);
    per_image[static_cast<size_t>(i)] =
        detect(image, rpn.backbone, ss, rpn.params.subcat, det, table, dc);
  });
  std::vector<Detection> all;
  for (const auto& dets : per_image) all.insert(all.end(), dets.begin(), dets.end());
  write_text_file(cfg.out + "/detections.csv", detections_to_csv(all));
}

void run_eval(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "eval", "dataset");
  require_path(cfg.subcats, "eval", "subcats");
  require_path(cfg.detections, "eval", "detections");
  const SubcategoryTable table = load_table(cfg, "eval");
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "eval");
  const std::vector<std::vector<Annotation>> gts = ground_truth_by_image(records);
  const std::vector<Detection> dets = detections_from_csv(read_text_file(
      require_path(cfg.detections, "eval", "detections"), "eval"));
  for (const Detection& d : dets) {
    SUBCNN_CHECK(d.image_id >= 0 && d.image_id < static_cast<int>(records.size()),
                 "eval: detection references image %d outside the dataset",
                 d.image_id);
  }
  MetricConfig mc;
  mc.iou_thresh = cfg.iou_thresh;
  mc.n_views = cfg.n_views;
  mc.interp = Interp::k11;
  const MetricReport report =
      evaluate_detections(dets, gts, table.class_names, mc);
  write_text_file(cfg.out + "/metrics.json", metric_report_json(report));

  if (!cfg.proposals.empty()) {
    const std::vector<std::vector<Roi>> per_image =
        proposals_from_csv(read_text_file(cfg.proposals, "eval"));
    SUBCNN_CHECK(per_image.size() <= records.size(),
                 "eval: proposals reference %zu images but the dataset has %zu",
                 per_image.size(), records.size());
    const Difficulty d = difficulty_from_name(cfg.difficulty);
    std::vector<std::vector<Annotation>> filtered(gts.size());
    for (size_t i = 0; i < gts.size(); ++i) filtered[i] = difficulty_filter(gts[i], d);
    const double recall = proposal_recall(proposals_as_detections(per_image),
                                          filtered, cfg.iou_thresh,
                                          cfg.proposals_per_image);
    ordered_json j;
    j["difficulty"] = cfg.difficulty;
    j["iou_thresh"] = cfg.iou_thresh;
    j["budget"] = cfg.proposals_per_image;
    j["recall"] = recall;
    write_text_file(cfg.out + "/proposal_recall.json", j.dump(2));
  }
}

void run_plot(const RunConfig& cfg) {
  prepare_out(cfg);
  require_path(cfg.dataset, "plot", "dataset");
  require_path(cfg.subcats, "plot", "subcats");
  require_path(cfg.detections, "plot", "detections");
  const SubcategoryTable table = load_table(cfg, "plot");
  const std::vector<ImageRecord> records = load_dataset_records(cfg, "plot");
  const std::vector<std::vector<Annotation>> gts = ground_truth_by_image(records);
  const Difficulty d = difficulty_from_name(cfg.difficulty);
  std::vector<std::vector<Annotation>> filtered(gts.size());
  for (size_t i = 0; i < gts.size(); ++i) filtered[i] = difficulty_filter(gts[i], d);

  const std::vector<Detection> dets = detections_from_csv(read_text_file(
      require_path(cfg.detections, "plot", "detections"), "plot"));
  char buf[128];
  for (int c = 1; c <= table.num_classes(); ++c) {
    std::vector<Detection> mine;
    for (const Detection& det : dets) {
      if (det.class_id == c) mine.push_back(det);
    }
    const PRCurve curve = detection_sweep(mine, filtered, cfg.iou_thresh);
    std::string csv = "recall,precision\n";
    for (size_t i = 0; i < curve.recall.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", curve.recall[i],
                    curve.precision[i]);
      csv += buf;
    }
    const std::string name =
        sanitize_name(table.class_names[static_cast<size_t>(c - 1)]);
    write_text_file(cfg.out + "/pr_" + name + ".csv", csv);
  }

  if (!cfg.proposals.empty()) {
    const std::vector<std::vector<Roi>> per_image =
        proposals_from_csv(read_text_file(cfg.proposals, "plot"));
    const std::vector<Detection> props = proposals_as_detections(per_image);
    std::vector<int> budgets = {1, 2, 5, 10, 20, 50, 100, 150, 200, 300, 500, 1000};
    budgets.erase(std::remove_if(budgets.begin(), budgets.end(),
                                 [&](int b) { return b > cfg.proposals_per_image; }),
                  budgets.end());
    if (budgets.empty() || budgets.back() != cfg.proposals_per_image) {
      budgets.push_back(cfg.proposals_per_image);
    }
    std::string csv = "budget,recall\n";
    for (int b : budgets) {
      const double r = proposal_recall(props, filtered, cfg.iou_thresh, b);
      std::snprintf(buf, sizeof(buf), "%d,%.17g\n", b, r);
      csv += buf;
    }
    write_text_file(cfg.out + "/recall_curve.csv", csv);
  }
}

void run_stage(const std::string& stage, const RunConfig& cfg) {
  if (stage == "gen-data") return run_gen_data(cfg);
  if (stage == "discover-subcats") return run_discover_subcats(cfg);
  if (stage == "train-rpn") return run_train_rpn(cfg);
  if (stage == "propose") return run_propose(cfg);
  if (stage == "train-det") return run_train_det(cfg);
  if (stage == "detect") return run_detect(cfg);
  if (stage == "eval") return run_eval(cfg);
  if (stage == "plot") return run_plot(cfg);
  SUBCNN_CHECK(false, "unknown stage '%s'", stage.c_str());
}

}  // namespace subcnn
