#include "subcnn/capi.h"

#include <cstring>
#include <new>
#include <string>

#include "subcnn/pipeline.hpp"

struct subcnn_run {
  subcnn::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

subcnn_status fail_invalid(const std::string& msg) {
  g_last_error = msg;
  return SUBCNN_ERR_INVALID_ARGUMENT;
}

// Maps a thrown exception onto a status code. Library checks signal
// subcnn::Error; anything else is reported as a runtime failure too.
template <typename Fn>
subcnn_status guarded(subcnn_status on_error, Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return SUBCNN_OK;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return on_error;
  } catch (...) {
    g_last_error = "unknown error";
    return on_error;
  }
}

char* dup_string(const std::string& s) {
  char* out = new (std::nothrow) char[s.size() + 1];
  if (out == nullptr) return nullptr;
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* subcnn_version(void) { return "1.0.0"; }

const char* subcnn_last_error(void) { return g_last_error.c_str(); }

subcnn_status subcnn_run_create(const char* config_json, subcnn_run** out_run) {
  if (out_run == nullptr) return fail_invalid("out_run must not be NULL");
  *out_run = nullptr;
  subcnn::RunConfig cfg;
  const subcnn_status st =
      guarded(SUBCNN_ERR_INVALID_ARGUMENT, [&] {
        cfg = subcnn::run_config_from_json(
            config_json == nullptr ? std::string() : std::string(config_json));
      });
  if (st != SUBCNN_OK) return st;
  *out_run = new (std::nothrow) subcnn_run{std::move(cfg)};
  if (*out_run == nullptr) return fail_invalid("out of memory");
  return SUBCNN_OK;
}

void subcnn_run_destroy(subcnn_run* run) { delete run; }

subcnn_status subcnn_run_set(subcnn_run* run, const char* key, const char* value) {
  if (run == nullptr) return fail_invalid("run must not be NULL");
  if (key == nullptr) return fail_invalid("key must not be NULL");
  if (value == nullptr) return fail_invalid("value must not be NULL");
  return guarded(SUBCNN_ERR_INVALID_ARGUMENT,
                 [&] { subcnn::run_config_set(run->cfg, key, value); });
}

subcnn_status subcnn_run_config_json(const subcnn_run* run, char** out_json) {
  if (run == nullptr) return fail_invalid("run must not be NULL");
  if (out_json == nullptr) return fail_invalid("out_json must not be NULL");
  *out_json = nullptr;
  std::string text;
  const subcnn_status st = guarded(
      SUBCNN_ERR_RUNTIME, [&] { text = subcnn::run_config_to_json(run->cfg); });
  if (st != SUBCNN_OK) return st;
  *out_json = dup_string(text);
  if (*out_json == nullptr) return fail_invalid("out of memory");
  return SUBCNN_OK;
}

subcnn_status subcnn_run_stage(subcnn_run* run, const char* stage) {
  if (run == nullptr) return fail_invalid("run must not be NULL");
  if (stage == nullptr) return fail_invalid("stage must not be NULL");
  return guarded(SUBCNN_ERR_RUNTIME,
                 [&] { subcnn::run_stage(stage, run->cfg); });
}

void subcnn_string_free(char* s) { delete[] s; }

}  // extern "C"
