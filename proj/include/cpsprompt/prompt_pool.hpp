#pragma once

// Expandable pool of prompt components composed by cosine weights of the
// query feature.

#include <cstddef>
#include <vector>

#include "cpsprompt/autodiff.hpp"
#include "cpsprompt/rng.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::pool {

struct PoolConfig {
  std::size_t prompt_length = 8;
  std::size_t quota = 2;                  // components added per task
  std::vector<std::size_t> layers{0, 1};  // 0-based injected blocks
  bool freeze_old = false;                // stop gradients into earlier tasks' components
  double prompt_init_std = 0.1;

  void validate(const vit::BackboneConfig& bb) const;  // ContractError
};

// Components are stored as stacked rows: row m of keys/attention and of every
// prompt matrix belongs to component m. A prompt matrix row is a flattened
// [prompt_length x D] block; keys and values of the prefix come from separate
// matrices.
class PromptPool {
 public:
  PromptPool(const PoolConfig& config, std::size_t dim);

  const PoolConfig& config() const { return config_; }
  std::size_t dim() const { return dim_; }
  std::size_t components() const { return keys_.value.dim(0); }
  std::size_t tasks() const { return tasks_; }

  // Appends `quota` components. Keys and attention vectors are orthonormalized
  // against the existing ones (Gram-Schmidt); more than D components is a
  // ContractError. task_index must equal tasks().
  void expand_for_task(std::size_t task_index, Rng& rng);

  void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const { return frozen_; }

  // query: [B x D] query features. Parameters are watched as trainable unless
  // the pool is frozen.
  vit::PromptPrefix compose(ad::Tape& tape, const ad::Var& query);
  // Component weights alone, [B x M].
  ad::Var weights(ad::Tape& tape, const ad::Var& query);

  // Zeroes gradient rows of components from earlier tasks when freeze_old is
  // set; call between backward and the optimizer step.
  void mask_gradients();

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::size_t parameter_count() const;

  // Direct access for tests and checkpoint round-trips.
  ad::Parameter& keys() { return keys_; }
  ad::Parameter& attention() { return attn_; }
  ad::Parameter& key_prompts(std::size_t i) { return key_prompts_.at(i); }
  ad::Parameter& value_prompts(std::size_t i) { return value_prompts_.at(i); }

 private:
  PoolConfig config_;
  std::size_t dim_;
  std::size_t tasks_ = 0;
  std::size_t first_trainable_ = 0;
  bool frozen_ = false;
  ad::Parameter keys_, attn_;
  std::vector<ad::Parameter> key_prompts_, value_prompts_;  // one per injected block
};

}  // namespace cpsp::pool
