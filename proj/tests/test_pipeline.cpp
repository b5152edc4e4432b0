#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "subcnn/pipeline.hpp"

using namespace subcnn;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Small-but-complete configuration for the end-to-end smoke run.
RunConfig smoke_config(const std::string& root) {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.out = root;
  cfg.images = 4;
  cfg.image_h = 48;
  cfg.image_w = 48;
  cfg.min_objects = 1;
  cfg.max_objects = 2;
  cfg.min_object_height = 14;
  cfg.max_object_height = 28;
  cfg.orientation_bins = 4;
  cfg.scales = {1.0};
  cfg.levels_between = 0;
  cfg.aspect_ratios = {1.5, 1.0, 0.5};
  cfg.filter_size = 3;
  cfg.backbone_c1 = 4;
  cfg.backbone_c2 = 8;
  cfg.hidden = 8;
  cfg.grid = 2;
  cfg.proposals_per_image = 20;
  cfg.heat_keep = 50;
  cfg.score_thresh = 0.0;
  cfg.train.iterations = 2;
  cfg.train.rpn_rois = 16;
  cfg.train.det_images = 1;
  cfg.train.det_rois = 8;
  cfg.train.log_every = 1;
  return cfg;
}

}  // namespace

TEST_CASE("run config defaults and JSON round trip") {
  const RunConfig def;
  CHECK(run_config_from_json("").seed == def.seed);
  CHECK(run_config_from_json("{}").images == def.images);

  // Serialize, parse back, serialize again: byte-stable.
  const std::string text = run_config_to_json(def);
  CHECK(text.back() == '\n');
  const RunConfig back = run_config_from_json(text);
  CHECK(run_config_to_json(back) == text);

  // A sweep of representative fields survives the trip.
  RunConfig cfg = smoke_config("x");
  cfg.classes = {"a", "b"};
  cfg.difficulty = "hard";
  cfg.train.learning_rate = 0.25;
  cfg.train.iterations = 7;
  const RunConfig cfg2 = run_config_from_json(run_config_to_json(cfg));
  CHECK(cfg2.seed == 11);
  CHECK(cfg2.classes == std::vector<std::string>{"a", "b"});
  CHECK(cfg2.scales == std::vector<double>{1.0});
  CHECK(cfg2.aspect_ratios == std::vector<double>{1.5, 1.0, 0.5});
  CHECK(cfg2.difficulty == "hard");
  CHECK(cfg2.train.learning_rate == 0.25);
  CHECK(cfg2.train.iterations == 7);
  CHECK(run_config_to_json(cfg2) == run_config_to_json(cfg));

  // The training seed never appears: the run seed drives everything.
  const nlohmann::json j = nlohmann::json::parse(text);
  CHECK(!j["train"].contains("seed"));
}

TEST_CASE("run config rejects unknown keys and bad values") {
  CHECK_THROWS_AS(run_config_from_json("{\"bogus\": 1}"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"train\": {\"bogus\": 1}}"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"train\": {\"seed\": 5}}"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"train\": 3}"), Error);
  CHECK_THROWS_AS(run_config_from_json("[1, 2]"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"threads\": \"many\"}"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"scales\": 1.0}"), Error);
  CHECK_THROWS_AS(run_config_from_json("not json"), Error);
}

TEST_CASE("run config single-key overrides") {
  RunConfig cfg;
  run_config_set(cfg, "seed", "9");
  CHECK(cfg.seed == 9);
  run_config_set(cfg, "difficulty", "hard");  // bare string, not valid JSON
  CHECK(cfg.difficulty == "hard");
  run_config_set(cfg, "difficulty", "\"easy\"");  // quoted works too
  CHECK(cfg.difficulty == "easy");
  run_config_set(cfg, "scales", "[0.25, 0.5]");
  CHECK(cfg.scales == std::vector<double>{0.25, 0.5});
  run_config_set(cfg, "classes", "[\"p\", \"q\"]");
  CHECK(cfg.classes == std::vector<std::string>{"p", "q"});
  run_config_set(cfg, "train.learning_rate", "0.5");
  CHECK(cfg.train.learning_rate == 0.5);
  run_config_set(cfg, "train.iterations", "3");
  CHECK(cfg.train.iterations == 3);
  CHECK(cfg.images == RunConfig().images);  // untouched fields keep defaults

  CHECK_THROWS_AS(run_config_set(cfg, "bogus", "1"), Error);
  CHECK_THROWS_AS(run_config_set(cfg, "train.bogus", "1"), Error);
  CHECK_THROWS_AS(run_config_set(cfg, "train.seed", "1"), Error);
  CHECK_THROWS_AS(run_config_set(cfg, "", "1"), Error);
  CHECK_THROWS_AS(run_config_set(cfg, "threads", "soon"), Error);
}

TEST_CASE("run config validation") {
  CHECK_NOTHROW(RunConfig().validate());
  auto bad = [](auto&& mutate) {
    RunConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), Error);
  };
  bad([](RunConfig& c) { c.threads = 0; });
  bad([](RunConfig& c) { c.out.clear(); });
  bad([](RunConfig& c) { c.images = 0; });
  bad([](RunConfig& c) { c.image_h = 8; });
  bad([](RunConfig& c) { c.max_objects = c.min_objects - 1; });
  bad([](RunConfig& c) { c.min_object_height = 0; });
  bad([](RunConfig& c) { c.occlusion_prob = 1.5; });
  bad([](RunConfig& c) { c.orientation_bins = 0; });
  bad([](RunConfig& c) { c.scales.clear(); });
  bad([](RunConfig& c) { c.scales = {2.0, 1.0}; });
  bad([](RunConfig& c) { c.scales = {0.0, 1.0}; });
  bad([](RunConfig& c) { c.levels_between = -1; });
  bad([](RunConfig& c) { c.aspect_ratios = {1.0, -2.0}; });
  bad([](RunConfig& c) { c.filter_size = 4; });
  bad([](RunConfig& c) { c.backbone_c1 = 0; });
  bad([](RunConfig& c) { c.hidden = 0; });
  bad([](RunConfig& c) { c.grid = 0; });
  bad([](RunConfig& c) { c.proposals_per_image = 0; });
  bad([](RunConfig& c) { c.heat_keep = 0; });
  bad([](RunConfig& c) { c.proposal_nms_iou = 0; });
  bad([](RunConfig& c) { c.nms_iou = 1.5; });
  bad([](RunConfig& c) { c.score_thresh = -0.1; });
  bad([](RunConfig& c) { c.iou_thresh = 0; });
  bad([](RunConfig& c) { c.n_views = 5; });
  bad([](RunConfig& c) { c.difficulty = "impossible"; });
  bad([](RunConfig& c) { c.train.iterations = 0; });
}

TEST_CASE("difficulty names and derived settings") {
  CHECK(difficulty_from_name("easy") == Difficulty::kEasy);
  CHECK(difficulty_from_name("moderate") == Difficulty::kModerate);
  CHECK(difficulty_from_name("hard") == Difficulty::kHard);
  CHECK_THROWS_AS(difficulty_from_name("EASY"), Error);

  RunConfig cfg;
  cfg.scales = {0.5, 1.0, 2.0};
  cfg.levels_between = 2;
  const ScaleSet ss = scale_set(cfg);
  CHECK(ss.computed == cfg.scales);
  CHECK(ss.M == 2);

  CHECK(effective_aspect_ratios(cfg) == kDefaultAspectRatios);
  cfg.aspect_ratios = {2.0, 1.0};
  CHECK(effective_aspect_ratios(cfg) == std::vector<double>{2.0, 1.0});
}

TEST_CASE("pipeline stages produce their artifacts end to end") {
  namespace fs = std::filesystem;
  const std::string root = "test_tmp/pipe";
  fs::remove_all(root);

  RunConfig cfg = smoke_config(root + "/data");
  run_gen_data(cfg);
  CHECK(fs::exists(root + "/data/labels.jsonl"));
  CHECK(fs::exists(root + "/data/images/img_00003.ppm"));
  CHECK(fs::exists(root + "/data/config.json"));
  // The echoed config parses and matches the one we ran.
  CHECK(run_config_to_json(run_config_from_json(slurp(root + "/data/config.json"))) ==
        run_config_to_json(cfg));

  cfg.dataset = root + "/data";
  cfg.out = root + "/subcats";
  run_discover_subcats(cfg);
  const std::string table_path = root + "/subcats/subcategories.json";
  CHECK(fs::exists(table_path));
  const SubcategoryTable table = SubcategoryTable::from_json(slurp(table_path));
  CHECK(table.num_classes() == 3);
  CHECK(table.K() == 12);  // 3 classes x 4 orientation bins

  cfg.subcats = table_path;
  cfg.out = root + "/rpn";
  run_train_rpn(cfg);
  CHECK(fs::exists(root + "/rpn/rpn_model/manifest.json"));
  CHECK(fs::exists(root + "/rpn/rpn_loss.csv"));
  CHECK(loss_log_from_csv(slurp(root + "/rpn/rpn_loss.csv")).size() == 2);

  cfg.rpn_model = root + "/rpn/rpn_model";
  cfg.out = root + "/props";
  run_propose(cfg);
  const std::string props_path = root + "/props/proposals.csv";
  CHECK(fs::exists(props_path));
  const auto per_image = proposals_from_csv(slurp(props_path));
  CHECK(per_image.size() == 4);
  for (const auto& rois : per_image) CHECK(rois.size() <= 20);

  cfg.proposals = props_path;
  cfg.out = root + "/det";
  run_train_det(cfg);
  CHECK(fs::exists(root + "/det/det_model/manifest.json"));
  CHECK(fs::exists(root + "/det/det_loss.csv"));

  cfg.det_model = root + "/det/det_model";
  cfg.out = root + "/dets";
  run_detect(cfg);
  const std::string dets_path = root + "/dets/detections.csv";
  CHECK(fs::exists(dets_path));
  const auto dets = detections_from_csv(slurp(dets_path));
  for (const Detection& d : dets) {
    CHECK(d.image_id >= 0);
    CHECK(d.image_id < 4);
    CHECK(d.class_id >= 1);
    CHECK(d.class_id <= 3);
  }

  cfg.detections = dets_path;
  cfg.out = root + "/eval";
  run_eval(cfg);
  CHECK(fs::exists(root + "/eval/metrics.json"));
  CHECK(fs::exists(root + "/eval/proposal_recall.json"));
  const nlohmann::json rec =
      nlohmann::json::parse(slurp(root + "/eval/proposal_recall.json"));
  CHECK(rec["difficulty"] == "moderate");
  CHECK(rec["budget"] == 20);
  CHECK(rec["recall"].get<double>() >= 0.0);
  CHECK(rec["recall"].get<double>() <= 1.0);
  const nlohmann::json met = nlohmann::json::parse(slurp(root + "/eval/metrics.json"));
  CHECK(met["classes"].size() == 3);

  // Scoring is deterministic: a second run writes byte-equal reports.
  const std::string first = slurp(root + "/eval/metrics.json");
  cfg.out = root + "/eval2";
  run_eval(cfg);
  CHECK(slurp(root + "/eval2/metrics.json") == first);

  cfg.out = root + "/plots";
  run_plot(cfg);
  for (const char* name : {"triangle", "ellipse", "bar"}) {
    const std::string csv = slurp(root + "/plots/pr_" + name + ".csv");
    CHECK(csv.rfind("recall,precision\n", 0) == 0);
  }
  const std::string curve = slurp(root + "/plots/recall_curve.csv");
  CHECK(curve.rfind("budget,recall\n", 0) == 0);
  CHECK(curve.find("\n20,") != std::string::npos);  // budget row at the cap

  // Dispatch by stage name hits the same code paths.
  cfg.out = root + "/eval3";
  run_stage("eval", cfg);
  CHECK(slurp(root + "/eval3/metrics.json") == first);
  CHECK_THROWS_AS(run_stage("shake", cfg), Error);
}

TEST_CASE("stages fail actionably when inputs are missing") {
  namespace fs = std::filesystem;
  const std::string root = "test_tmp/pipe_missing";
  fs::remove_all(root);
  RunConfig cfg = smoke_config(root + "/out");

  // Required path keys left empty.
  CHECK_THROWS_WITH_AS(run_discover_subcats(cfg),
                       doctest::Contains("'dataset' is required"), Error);
  cfg.dataset = root + "/never_made";
  CHECK_THROWS_WITH_AS(run_discover_subcats(cfg), doctest::Contains("labels.jsonl"),
                       Error);
  CHECK_THROWS_WITH_AS(run_train_rpn(cfg), doctest::Contains("'subcats' is required"),
                       Error);
  cfg.subcats = root + "/nope.json";
  CHECK_THROWS_AS(run_train_rpn(cfg), Error);
  CHECK_THROWS_WITH_AS(run_propose(cfg), doctest::Contains("'rpn_model' is required"),
                       Error);
  CHECK_THROWS_WITH_AS(run_eval(cfg), doctest::Contains("'detections' is required"),
                       Error);
}
