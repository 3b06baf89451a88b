#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace tabscope {

/// Seeded 64-bit stream with hand-rolled distributions, so sequences do not
/// depend on the standard library's distribution implementations.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  // Independent stream derived from this stream's seed and a stable label.
  RandomStream derive(std::string_view label) const;
  // Independent stream for an integer position (episode index, worker id).
  RandomStream at(std::uint64_t position) const;
  // Consumes one draw and returns a stream seeded from it.
  RandomStream split();

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  long uniform_int(long lo, long hi);     // inclusive bounds
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename Vec>
  void shuffle(Vec& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<long>(i) - 1));
      std::swap(values[i - 1], values[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace tabscope
