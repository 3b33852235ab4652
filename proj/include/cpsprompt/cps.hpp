#pragma once

// Critical patch sampling and the uniform / top-k baselines.
//
// Index convention: selection functions return 0-based positions j into the
// score vector; position j is the patch with orig_index j + 2.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cpsprompt/rng.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::cps {

// Patches kept out of n_patches at reduction ratio r: floor((1 - r) * n).
// A 1e-9 slack absorbs decimal representation error (0.6 * 10 must give 6).
std::size_t budget(std::size_t n_patches, double r);

struct CpsConfig {
  double temperature = 0.1;
  double reduction_ratio = 0.4;
  std::uint64_t seed = 0;

  // ContractError unless tau > 0, 0 <= r < 1 and the budget is >= 1.
  void validate(std::size_t n_patches) const;
  std::size_t budget(std::size_t n_patches) const { return cps::budget(n_patches, reduction_ratio); }
};

struct CriticalDistribution {
  std::vector<double> scores;
  std::vector<double> probs;
  double temperature = 0.0;  // 0 when probs were given directly
};

std::vector<double> critical_scores(const vit::AttentionTrace& trace);
CriticalDistribution to_distribution(std::vector<double> scores, double tau);

// Plackett-Luce: k successive draws, each from p renormalized over the
// positions not yet taken. With scores and a temperature the renormalization
// is redone from the remaining scores, so probabilities that underflowed in p
// still order the later draws. Without them, zero remaining mass falls back
// to a uniform draw.
std::vector<std::size_t> sample_without_replacement(const CriticalDistribution& dist, std::size_t k, Rng& rng);
// k largest probabilities, ties to the lower position; returned in rank order.
std::vector<std::size_t> top_k(const CriticalDistribution& dist, std::size_t k);
// Partial Fisher-Yates.
std::vector<std::size_t> uniform_sample(std::size_t n, std::size_t k, Rng& rng);

inline int orig_index_of(std::size_t position) { return static_cast<int>(position) + 2; }

// Class token followed by the chosen patches in the given order, each keeping
// its original index and embedding. `orig_indices` are patch orig_index values.
vit::TokenSequence assemble_sparse(const vit::TokenSequence& seq, std::span<const int> orig_indices);
vit::TokenSequence assemble_positions(const vit::TokenSequence& seq, std::span<const std::size_t> positions);

}  // namespace cpsp::cps
