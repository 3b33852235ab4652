#include "cpsprompt/prompt_pool.hpp"

#include <cmath>
#include <set>

#include "cpsprompt/errors.hpp"

namespace cpsp::pool {

using ad::Group;
using ad::Parameter;

void PoolConfig::validate(const vit::BackboneConfig& bb) const {
  if (prompt_length < 1) throw ContractError("pool: prompt_length must be >= 1");
  if (quota < 1) throw ContractError("pool: quota must be >= 1");
  std::set<std::size_t> seen;
  for (std::size_t l : layers) {
    if (l >= bb.layers) throw ContractError("pool: injected block " + std::to_string(l) + " out of range");
    if (!seen.insert(l).second) throw ContractError("pool: injected block listed twice");
  }
  if (prompt_init_std < 0.0) throw ContractError("pool: prompt_init_std must be >= 0");
}

PromptPool::PromptPool(const PoolConfig& config, std::size_t dim) : config_(config), dim_(dim) {
  keys_ = Parameter("pool.keys", Group::prompt, Tensor({0, dim}));
  attn_ = Parameter("pool.attention", Group::prompt, Tensor({0, dim}));
  const std::size_t width = config_.prompt_length * dim;
  for (std::size_t l : config_.layers) {
    key_prompts_.emplace_back("pool.block" + std::to_string(l) + ".k", Group::prompt, Tensor({0, width}));
    value_prompts_.emplace_back("pool.block" + std::to_string(l) + ".v", Group::prompt, Tensor({0, width}));
  }
}

namespace {

// Appends `count` unit rows orthogonal to all existing rows.
void append_orthonormal(Parameter& p, std::size_t count, Rng& rng) {
  const std::size_t d = p.value.dim(1), old = p.value.dim(0);
  std::vector<double> data(p.value.data().begin(), p.value.data().end());
  data.resize((old + count) * d);
  for (std::size_t r = old; r < old + count; ++r) {
    double* row = data.data() + r * d;
    for (int attempt = 0;; ++attempt) {
      for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
      // Two passes of modified Gram-Schmidt keep orthogonality near machine precision.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < r; ++q) {
          const double* other = data.data() + q * d;
          double dot = 0.0, nn = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dot += row[j] * other[j];
            nn += other[j] * other[j];
          }
          if (nn == 0.0) continue;
          for (std::size_t j = 0; j < d; ++j) row[j] -= dot / nn * other[j];
        }
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
        break;
      }
      if (attempt > 16) throw NumericError("pool: Gram-Schmidt failed to find a new direction");
    }
  }
  p.value = Tensor({old + count, d}, std::move(data));
  p.grad = Tensor(p.value.shape());
}

void append_gaussian(Parameter& p, std::size_t count, double stddev, Rng& rng) {
  const std::size_t w = p.value.dim(1), old = p.value.dim(0);
  std::vector<double> data(p.value.data().begin(), p.value.data().end());
  data.resize((old + count) * w);
  for (std::size_t i = old * w; i < data.size(); ++i) data[i] = stddev * rng.normal();
  p.value = Tensor({old + count, w}, std::move(data));
  p.grad = Tensor(p.value.shape());
}

}  // namespace

void PromptPool::expand_for_task(std::size_t task_index, Rng& rng) {
  if (task_index != tasks_) {
    throw ContractError("pool: expected task " + std::to_string(tasks_) + ", got " + std::to_string(task_index));
  }
  if (components() + config_.quota > dim_) {
    throw ContractError("pool: " + std::to_string(components() + config_.quota) +
                        " components cannot have orthogonal keys in dimension " + std::to_string(dim_));
  }
  first_trainable_ = config_.freeze_old ? components() : 0;
  append_orthonormal(keys_, config_.quota, rng);
  append_orthonormal(attn_, config_.quota, rng);
  for (std::size_t i = 0; i < key_prompts_.size(); ++i) {
    append_gaussian(key_prompts_[i], config_.quota, config_.prompt_init_std, rng);
    append_gaussian(value_prompts_[i], config_.quota, config_.prompt_init_std, rng);
  }
  ++tasks_;
}

ad::Var PromptPool::weights(ad::Tape& tape, const ad::Var& query) {
  if (components() == 0) throw ContractError("pool: compose on an empty pool");
  const bool train = !frozen_;
  return ad::cosine_weights(tape, query, tape.watch(attn_, train), tape.watch(keys_, train));
}

vit::PromptPrefix PromptPool::compose(ad::Tape& tape, const ad::Var& query) {
  const bool train = !frozen_;
  ad::Var alpha = weights(tape, query);
  const std::size_t batch = query.shape()[0], len = config_.prompt_length;
  vit::PromptPrefix prefix;
  prefix.length = len;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    ad::Var k = ad::matmul(tape, alpha, tape.watch(key_prompts_[i], train));
    ad::Var v = ad::matmul(tape, alpha, tape.watch(value_prompts_[i], train));
    prefix.layers[config_.layers[i]] = vit::LayerPrefix{ad::reshape(tape, k, {batch * len, dim_}),
                                                        ad::reshape(tape, v, {batch * len, dim_})};
  }
  return prefix;
}

void PromptPool::mask_gradients() {
  if (first_trainable_ == 0) return;
  for (Parameter* p : parameters()) {
    const std::size_t w = p->grad.dim(1);
    std::fill_n(p->grad.ptr(), first_trainable_ * w, 0.0);
  }
}

std::vector<Parameter*> PromptPool::parameters() {
  std::vector<Parameter*> out{&keys_, &attn_};
  for (std::size_t i = 0; i < key_prompts_.size(); ++i) {
    out.push_back(&key_prompts_[i]);
    out.push_back(&value_prompts_[i]);
  }
  return out;
}

std::vector<const Parameter*> PromptPool::parameters() const {
  auto mut = const_cast<PromptPool*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t PromptPool::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->numel();
  return n;
}

}  // namespace cpsp::pool
