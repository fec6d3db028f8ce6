#include "fedlora/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fedlora {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string_view stream_id)
    : engine_(splitmix64(splitmix64(seed) ^ fnv1a(stream_id))) {}

double RngStream::uniform(double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("uniform: requires lo < hi");
  return lo + (hi - lo) * unit();
}

double RngStream::gaussian(double mean, double stddev) {
  if (stddev < 0.0) throw std::invalid_argument("gaussian: requires std >= 0");
  if (stddev == 0.0) return mean;
  double u1 = unit();
  double u2 = unit();
  // unit() is in [0,1); flip to (0,1] so the log is finite.
  double z = std::sqrt(-2.0 * std::log(1.0 - u1)) *
             std::cos(2.0 * std::numbers::pi * u2);
  return mean + stddev * z;
}

std::size_t RngStream::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  // Rejection sampling for an unbiased bounded draw.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

}  // namespace fedlora
