#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace hmamba {

// Deterministic random stream. Every source of randomness in the project is
// derived from one user-visible seed plus a stream name, so sub-systems
// (data, init, dropout) never perturb each other's draws.
class RngStream {
 public:
  RngStream() : engine_(0) {}
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  static RngStream derive(std::uint64_t seed, std::string_view stream_name);

  double uniform(double lo, double hi);
  double normal(double mean, double stddev);
  // Uniform integer in [0, n).
  int uniform_int(int n);

  std::mt19937_64& engine() { return engine_; }

  std::string serialize_state() const;
  void restore_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

// FNV-1a, used to fold stream names and split keys into seeds.
std::uint64_t fnv1a(std::string_view s);

}  // namespace hmamba
