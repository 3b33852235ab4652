#pragma once

#include <cstdint>
#include <initializer_list>

namespace cpsp {

// xoshiro256** with SplitMix64 seeding.
//
// Streams are derived, never shared: Rng::stream(seed, {a, b, c}) folds each
// path element into the seed with SplitMix64, so e.g. (run seed, task, epoch,
// batch) names one independent, replayable stream. Uniform and normal draws
// are computed here (not via <random> distributions) so outputs are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);
  // Child stream; does not advance this generator.
  Rng split(std::uint64_t tag) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

 private:
  std::uint64_t s_[4];
  std::uint64_t key_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace cpsp
