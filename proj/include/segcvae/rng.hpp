#pragma once

#include <cstdint>

namespace segcvae {

/// Counter-based generator: the n-th draw is a pure function of (seed, n), so
/// the full state is two integers and is trivially serializable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 123456) : seed_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t counter) : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform in the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  /// Standard Gumbel(0, 1) sample.
  double gumbel();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent stream derived from this seed and a label.
  Rng fork(std::uint64_t label) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace segcvae
