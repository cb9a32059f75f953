#include "hmamba/rng.hpp"

#include <sstream>

namespace hmamba {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

RngStream RngStream::derive(std::uint64_t seed, std::string_view stream_name) {
  std::uint64_t mixed = seed ^ fnv1a(stream_name);
  // splitmix64 step decorrelates adjacent seeds.
  mixed += 0x9e3779b97f4a7c15ull;
  mixed = (mixed ^ (mixed >> 30)) * 0xbf58476d1ce4e5b9ull;
  mixed = (mixed ^ (mixed >> 27)) * 0x94d049bb133111ebull;
  mixed ^= mixed >> 31;
  return RngStream(mixed);
}

double RngStream::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(engine_);
}

double RngStream::normal(double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(engine_);
}

int RngStream::uniform_int(int n) {
  std::uniform_int_distribution<int> dist(0, n - 1);
  return dist(engine_);
}

std::string RngStream::serialize_state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void RngStream::restore_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
}

}  // namespace hmamba
