#pragma once

// Micro vision transformer shared by the frozen query pass and the
// prompt-injected pass.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpsprompt/autodiff.hpp"
#include "cpsprompt/rng.hpp"
#include "cpsprompt/tensor.hpp"

namespace cpsp::vit {

using ad::Parameter;
using ad::Tape;
using ad::Var;

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t grid_side = 8;
  std::size_t patch_dim = 16;

  std::size_t num_patches() const { return grid_side * grid_side; }
  std::size_t hidden() const { return mlp_ratio * dim; }
  std::size_t head_dim() const { return dim / heads; }
  void validate() const;  // ContractError on violation
};

// Tokens in sequence order. orig_index uses 1-based positions: the class
// token is 1 and always first; patch tokens keep their grid position 2..N+1
// after any reordering or sparsification. Embeddings already include the
// positional term.
struct TokenSequence {
  std::vector<int> orig_index;
  Tensor embeddings;  // [n x D]

  std::size_t size() const { return orig_index.size(); }
  std::size_t patch_count() const { return size() - 1; }
  void validate(std::size_t num_patches) const;
};

// Final-block signals from the query pass, indexed by patch (orig_index - 2).
struct AttentionTrace {
  std::vector<double> cls_to_patch;  // head-summed class->patch attention probabilities
  std::vector<double> value_norms;   // L2 norm of each patch's value over all heads
};

struct QueryResult {
  Tensor z_q;  // [D] final class-token embedding
  AttentionTrace trace;
};

// Key/value rows injected in front of a block's own keys and values.
struct LayerPrefix {
  Var keys;    // [batch*length x D]
  Var values;  // [batch*length x D]
};

struct PromptPrefix {
  std::size_t length = 0;
  std::map<std::size_t, LayerPrefix> layers;  // block index -> prefix
};

// Parameter groups a forward pass may train.
class TrainableSet {
 public:
  TrainableSet() = default;
  static TrainableSet none() { return {}; }
  static TrainableSet of(std::initializer_list<ad::Group> groups);
  // Accepts "prompt" and "classifier"; anything else is a ContractError.
  static TrainableSet parse(const std::vector<std::string>& names);

  bool contains(ad::Group g) const { return ad::has(mask_, g); }
  ad::GroupMask mask() const { return mask_; }
  bool empty() const { return mask_ == 0; }
  friend bool operator==(TrainableSet, TrainableSet) = default;

 private:
  ad::GroupMask mask_ = 0;
};

struct BlockParams {
  Parameter ln1_g, ln1_b;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_g, ln2_b;
  Parameter w1, b1, w2, b2;
};

class Backbone {
 public:
  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }

  // [N x patch_dim] grid -> class token + N patch tokens, positions attached.
  TokenSequence embed(const Tensor& raw_grid) const;
  // Taped embedding of full sequences for a batch of grids (used when the
  // backbone itself is trained).
  Var embed_batch(Tape& tape, std::span<const Tensor* const> grids, bool trainable);

  // Frozen pass over a full sequence; no gradient state is created.
  QueryResult query_forward(const TokenSequence& seq) const;
  std::vector<QueryResult> query_forward_batch(std::span<const TokenSequence> seqs) const;

  // Runs all blocks over `tokens` [batch*n x D] and returns the final
  // normalized token features. If `final_probs`/`final_values` are given they
  // receive the last block's attention probabilities and value matrix.
  Var encode(Tape& tape, const Var& tokens, std::size_t batch, const PromptPrefix* prefix,
             bool trainable, Tensor* final_probs = nullptr, Tensor* final_values = nullptr);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

 private:
  BackboneConfig config_;
  Parameter patch_w_, patch_b_, cls_, pos_;
  std::vector<BlockParams> blocks_;
  Parameter final_g_, final_b_;
};

class Classifier {
 public:
  Classifier(std::size_t dim, std::size_t classes, Rng& rng);

  std::size_t classes() const { return w_.value.dim(1); }
  Var forward(Tape& tape, const Var& features, bool trainable);
  std::vector<Parameter*> parameters() { return {&w_, &b_}; }
  std::vector<const Parameter*> parameters() const { return {&w_, &b_}; }

 private:
  Parameter w_, b_;
};

// Stacks same-length sequences into a [batch*n x D] matrix.
Tensor stack_tokens(std::span<const TokenSequence> seqs);

// Final class-token features [batch x D] of the prompt-injected pass.
Var prompt_features(Tape& tape, Backbone& backbone, std::span<const TokenSequence> batch,
                    const PromptPrefix* prefix);

// Prompt-injected pass: tokens through the frozen backbone with `prefix`
// injected, class-token features through the classifier. The backbone never
// receives gradients; `trainable` must be a subset of {prompt, classifier}.
// Prompt gradients flow only if the prefix was composed from trainable
// prompt parameters.
Var prompt_forward(Tape& tape, Backbone& backbone, Classifier& head,
                   std::span<const TokenSequence> batch, const PromptPrefix* prefix,
                   TrainableSet trainable);

// Prompt-free forward from raw grids to logits; with `trainable` every
// backbone and head parameter receives gradients (pretraining, naive
// fine-tuning).
Var backbone_forward(Tape& tape, Backbone& backbone, Classifier& head,
                     std::span<const Tensor* const> grids, bool trainable);

}  // namespace cpsp::vit
