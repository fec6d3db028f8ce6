#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace fedlora {

// Deterministic random stream addressed by (seed, stream_id). The engine is
// std::mt19937_64 (sequence pinned by the C++ standard) seeded through a
// splitmix64 mix of the run seed and an FNV-1a hash of the stream id; all
// variate transforms below are implemented here rather than via the standard
// distributions, so identical (seed, stream_id, call sequence) yields
// identical outputs on every platform.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view stream_id);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [lo, hi). Requires lo < hi.
  double uniform(double lo, double hi);
  // Uniform in [0, 1).
  double unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // Gaussian via Box-Muller; std == 0 returns mean exactly. Requires std >= 0.
  double gaussian(double mean, double stddev);
  // Uniform index in [0, n). Requires n > 0.
  std::size_t uniform_index(std::size_t n);

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.empty()) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedlora
