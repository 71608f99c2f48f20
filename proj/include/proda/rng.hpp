#pragma once

// Portable PRNG shared by every seeded operation, so that a seed reproduces
// the same sequence in any implementation of the file formats:
//
//   state    xoshiro256** (Blackman & Vigna), state words filled by four
//            successive splitmix64 outputs starting from the seed
//   uniform  (next() >> 11) * 2^-53, in [0, 1)
//   below(n) Lemire multiply-shift with rejection, unbiased in [0, n)
//   normal   Box-Muller on u1 = 1 - uniform(), u2 = uniform(); the cosine
//            branch is returned first and the sine branch is cached
//   shuffle  Fisher-Yates from the back: for i = n-1..1 swap(a[i], a[below(i+1)])

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace proda {

class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256starstar-splitmix64";

  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // First k entries of a shuffled 0..n-1.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace proda
