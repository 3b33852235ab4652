#include "cpsprompt/cps.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpsprompt/errors.hpp"

namespace cpsp::cps {

std::size_t budget(std::size_t n_patches, double r) {
  return static_cast<std::size_t>(std::floor((1.0 - r) * static_cast<double>(n_patches) + 1e-9));
}

void CpsConfig::validate(std::size_t n_patches) const {
  if (!(temperature > 0.0)) throw ContractError("cps: temperature must be > 0");
  if (!(reduction_ratio >= 0.0 && reduction_ratio < 1.0)) throw ContractError("cps: reduction ratio must be in [0, 1)");
  if (budget(n_patches) < 1) {
    throw ContractError("cps: reduction ratio " + std::to_string(reduction_ratio) + " keeps no patch of " +
                        std::to_string(n_patches));
  }
}

std::vector<double> critical_scores(const vit::AttentionTrace& trace) {
  if (trace.cls_to_patch.size() != trace.value_norms.size()) {
    throw DimensionError("critical_scores: attention and value-norm lengths differ");
  }
  std::vector<double> s(trace.cls_to_patch.size());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = trace.cls_to_patch[j] * trace.value_norms[j];
  return s;
}

CriticalDistribution to_distribution(std::vector<double> scores, double tau) {
  if (!(tau > 0.0)) throw ContractError("to_distribution: temperature must be > 0");
  if (scores.empty()) throw ContractError("to_distribution: empty score vector");
  CriticalDistribution d;
  d.probs.resize(scores.size());
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) z += d.probs[j] = std::exp((scores[j] - mx) / tau);
  for (double& p : d.probs) p /= z;
  d.scores = std::move(scores);
  d.temperature = tau;
  return d;
}

namespace {

void check_k(std::size_t k, std::size_t n, const char* where) {
  if (k < 1 || k > n) {
    throw ContractError(std::string(where) + ": k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
}

}  // namespace

std::vector<std::size_t> sample_without_replacement(const CriticalDistribution& dist, std::size_t k, Rng& rng) {
  const std::size_t n = dist.probs.size();
  check_k(k, n, "sample_without_replacement");
  const bool from_scores = dist.temperature > 0.0 && dist.scores.size() == n;
  std::vector<std::size_t> remaining(n);
  std::iota(remaining.begin(), remaining.end(), 0);
  std::vector<double> w(n);
  std::vector<std::size_t> out;
  out.reserve(k);
  while (out.size() < k) {
    const std::size_t m = remaining.size();
    if (from_scores) {
      double mx = dist.scores[remaining[0]];
      for (std::size_t j : remaining) mx = std::max(mx, dist.scores[j]);
      for (std::size_t i = 0; i < m; ++i) w[i] = std::exp((dist.scores[remaining[i]] - mx) / dist.temperature);
    } else {
      for (std::size_t i = 0; i < m; ++i) w[i] = dist.probs[remaining[i]];
    }
    double mass = 0.0;
    for (std::size_t i = 0; i < m; ++i) mass += w[i];
    std::size_t pick = m - 1;
    if (mass > 0.0) {
      const double u = rng.uniform() * mass;
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        acc += w[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
      // Rounding can leave u >= acc at the end; fall back to the last positive entry.
      while (w[pick] == 0.0 && pick > 0) --pick;
    } else {
      pick = static_cast<std::size_t>(rng.below(m));
    }
    out.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

std::vector<std::size_t> top_k(const CriticalDistribution& dist, std::size_t k) {
  const std::size_t n = dist.probs.size();
  check_k(k, n, "top_k");
  // p is increasing in s, and s still orders entries whose p underflowed.
  const auto& key = dist.temperature > 0.0 && dist.scores.size() == n ? dist.scores : dist.probs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  order.resize(k);
  return order;
}

std::vector<std::size_t> uniform_sample(std::size_t n, std::size_t k, Rng& rng) {
  check_k(k, n, "uniform_sample");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

vit::TokenSequence assemble_sparse(const vit::TokenSequence& seq, std::span<const int> orig_indices) {
  if (seq.orig_index.empty() || seq.orig_index.front() != 1) {
    throw ContractError("assemble_sparse: class token must come first");
  }
  const std::size_t d = seq.embeddings.dim(1);
  int max_index = 1;
  for (int idx : seq.orig_index) max_index = std::max(max_index, idx);
  std::vector<std::ptrdiff_t> row_of(static_cast<std::size_t>(max_index) + 1, -1);
  for (std::size_t r = 0; r < seq.size(); ++r) row_of[static_cast<std::size_t>(seq.orig_index[r])] = static_cast<std::ptrdiff_t>(r);

  std::vector<bool> used(row_of.size(), false);
  vit::TokenSequence out;
  out.orig_index.reserve(orig_indices.size() + 1);
  out.orig_index.push_back(1);
  out.embeddings = Tensor({orig_indices.size() + 1, d});
  std::copy_n(seq.embeddings.ptr(), d, out.embeddings.ptr());
  for (std::size_t i = 0; i < orig_indices.size(); ++i) {
    const int idx = orig_indices[i];
    if (idx < 2 || idx > max_index || row_of[static_cast<std::size_t>(idx)] < 0) {
      throw ContractError("assemble_sparse: patch index " + std::to_string(idx) + " not in the sequence");
    }
    if (used[static_cast<std::size_t>(idx)]) {
      throw ContractError("assemble_sparse: duplicate patch index " + std::to_string(idx));
    }
    used[static_cast<std::size_t>(idx)] = true;
    out.orig_index.push_back(idx);
    std::copy_n(seq.embeddings.ptr() + static_cast<std::size_t>(row_of[static_cast<std::size_t>(idx)]) * d, d,
                out.embeddings.ptr() + (i + 1) * d);
  }
  return out;
}

vit::TokenSequence assemble_positions(const vit::TokenSequence& seq, std::span<const std::size_t> positions) {
  std::vector<int> idx(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) idx[i] = orig_index_of(positions[i]);
  return assemble_sparse(seq, idx);
}

}  // namespace cpsp::cps
