// Command-line driver for the detection pipeline. Each subcommand maps to one
// pipeline stage; a JSON config file supplies the base configuration and
// individual flags override it. The binary talks to the library exclusively
// through its C API.
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "subcnn/capi.h"

namespace {

// One pending key=value override, applied in command-line order.
struct Override {
  std::string key;
  std::string value;
};

std::string join_list(const std::vector<double>& values) {
  std::string out = "[";
  char buf[64];
  for (size_t i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
    if (i) out += ",";
    out += buf;
  }
  return out + "]";
}

std::string quote_json(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

struct StageCli {
  std::string config_path;
  std::vector<Override> overrides;

  // Registers the flags shared by every subcommand. Each flag records an
  // override only when actually passed, so file values survive untouched.
  void add_common(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON configuration file");
    add_value(cmd, "--seed", "seed", "Base seed for this run");
    add_value(cmd, "--out", "out", "Output directory", true);
    add_value(cmd, "--threads", "threads", "Worker thread cap");
    add_list(cmd, "--scales", "scales", "Computed pyramid scales (ascending)");
    add_list(cmd, "--aspect-ratios", "aspect_ratios", "Candidate box aspect ratios");
    add_value(cmd, "--proposals-per-image", "proposals_per_image",
              "Proposal budget per image");
    add_value(cmd, "--iou-thresh", "iou_thresh", "IoU threshold for matching");
    add_value(cmd, "--difficulty", "difficulty",
              "Difficulty filter: easy, moderate, or hard", true);
    add_value(cmd, "--dataset", "dataset", "Dataset directory", true);
    add_value(cmd, "--subcats", "subcats", "Subcategory table JSON", true);
    add_value(cmd, "--rpn-model", "rpn_model", "Proposal-model checkpoint dir", true);
    add_value(cmd, "--det-model", "det_model", "Detector checkpoint dir", true);
    add_value(cmd, "--proposals", "proposals", "Proposals CSV", true);
    add_value(cmd, "--detections", "detections", "Detections CSV", true);
    add_value(cmd, "--images", "images", "Number of images to generate");
    add_value(cmd, "--iterations", "train.iterations", "Training iterations");
    add_value(cmd, "--learning-rate", "train.learning_rate", "SGD learning rate");
  }

  void add_value(CLI::App* cmd, const std::string& flag, const std::string& key,
                 const std::string& help, bool is_string = false) {
    auto holder = std::make_shared<std::string>();
    cmd->add_option_function<std::string>(
           flag,
           [this, key, holder, is_string](const std::string& v) {
             overrides.push_back({key, is_string ? quote_json(v) : v});
           },
           help)
        ->expected(1);
  }

  void add_list(CLI::App* cmd, const std::string& flag, const std::string& key,
                const std::string& help) {
    cmd->add_option_function<std::vector<double>>(
           flag,
           [this, key](const std::vector<double>& v) {
             overrides.push_back({key, join_list(v)});
           },
           help)
        ->expected(-1);
  }
};

int fail(const char* what) {
  std::fprintf(stderr, "error: %s: %s\n", what, subcnn_last_error());
  return 1;
}

int run_stage_command(const StageCli& cli, const std::string& stage) {
  std::string config_text;
  if (!cli.config_path.empty()) {
    std::ifstream f(cli.config_path, std::ios::binary);
    if (!f.good()) {
      std::fprintf(stderr, "error: cannot read config file %s\n",
                   cli.config_path.c_str());
      return 1;
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    config_text = ss.str();
  }

  subcnn_run* run = nullptr;
  if (subcnn_run_create(config_text.empty() ? nullptr : config_text.c_str(),
                        &run) != SUBCNN_OK) {
    return fail("invalid configuration");
  }
  for (const Override& o : cli.overrides) {
    if (subcnn_run_set(run, o.key.c_str(), o.value.c_str()) != SUBCNN_OK) {
      const int rc = fail(("bad value for " + o.key).c_str());
      subcnn_run_destroy(run);
      return rc;
    }
  }
  const subcnn_status st = subcnn_run_stage(run, stage.c_str());
  subcnn_run_destroy(run);
  if (st != SUBCNN_OK) return fail(stage.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subcategory-aware object proposal and detection pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", subcnn_version());

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"gen-data", "Generate a synthetic dataset (images + labels.jsonl)"},
      {"discover-subcats", "Build the subcategory table from a dataset"},
      {"train-rpn", "Train the proposal network"},
      {"propose", "Export region proposals for a dataset"},
      {"train-det", "Train the detector on exported proposals"},
      {"detect", "Run full detection over a dataset"},
      {"eval", "Score detections (and optionally proposal recall)"},
      {"plot", "Write precision/recall and recall-vs-budget curves"}};

  std::vector<std::unique_ptr<StageCli>> clis;
  for (const auto& [name, help] : stages) {
    CLI::App* cmd = app.add_subcommand(name, help);
    clis.push_back(std::make_unique<StageCli>());
    clis.back()->add_common(cmd);
  }

  CLI11_PARSE(app, argc, argv);

  for (size_t i = 0; i < stages.size(); ++i) {
    if (app.get_subcommand(stages[i].first)->parsed()) {
      return run_stage_command(*clis[i], stages[i].first);
    }
  }
  std::fprintf(stderr, "error: no subcommand given\n");
  return 1;
}
