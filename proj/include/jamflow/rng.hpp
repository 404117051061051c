#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace jamflow {

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// Stateless counter-based generator: every draw is a pure function of
// (key, counter), and keys are derived hierarchically from (seed, index, tag).
// Nothing here depends on the standard library's distribution implementations,
// so streams are identical across platforms.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  constexpr CounterRng derive(std::uint64_t index) const {
    CounterRng child(0);
    child.key_ = mix64(key_ ^ mix64(index + 0x9e3779b97f4a7c15ULL));
    return child;
  }
  constexpr CounterRng derive(std::string_view tag) const { return derive(fnv1a(tag)); }
  constexpr CounterRng derive(std::string_view tag, std::uint64_t index) const {
    return derive(tag).derive(index);
  }

  constexpr std::uint64_t next_u64() {
    std::uint64_t x = key_ + (counter_++) * 0x9e3779b97f4a7c15ULL;
    return mix64(mix64(x));
  }

  // Uniform on [0, 1) with 53 bits of resolution.
  constexpr double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  constexpr std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  constexpr std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace jamflow
