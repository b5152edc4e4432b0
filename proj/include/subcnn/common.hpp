#pragma once

#include <cstdarg>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace subcnn {

/// Error thrown by all library checks; carries a formatted message.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] void fail(const char* file, int line, const char* fmt, ...);

#define SUBCNN_CHECK(cond, ...)                              \
  do {                                                       \
    if (!(cond)) ::subcnn::fail(__FILE__, __LINE__, __VA_ARGS__); \
  } while (0)

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

/// Current verbosity, read once from SUBCNN_LOG (error|warn|info|debug).
LogLevel log_level();
void log_msg(LogLevel level, const char* fmt, ...);

#define SUBCNN_WARN(...) ::subcnn::log_msg(::subcnn::LogLevel::kWarn, __VA_ARGS__)
#define SUBCNN_INFO(...) ::subcnn::log_msg(::subcnn::LogLevel::kInfo, __VA_ARGS__)
#define SUBCNN_DEBUG(...) ::subcnn::log_msg(::subcnn::LogLevel::kDebug, __VA_ARGS__)

/// Deterministic xoshiro256++ generator. Identical sequences on every
/// platform for a given seed; std:: distributions are avoided on purpose
/// because their outputs are implementation defined.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);
  /// Standard normal via Box-Muller (the spare value is cached).
  double gaussian();
  double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }
  /// Independent child stream; (seed, stream) pairs never collide in practice.
  Rng fork(uint64_t stream) const;

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
  uint64_t seed_ = 0;
};

/// Runs fn(i) for i in [0, n). With threads <= 1 the loop is inline and
/// sequential; otherwise indices are split into contiguous chunks, one per
/// worker. Safe only when iterations write disjoint outputs.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn);

}  // namespace subcnn
