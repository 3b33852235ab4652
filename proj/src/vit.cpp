#include "cpsprompt/vit.hpp"

#include <cmath>

#include "cpsprompt/errors.hpp"

namespace cpsp::vit {

using ad::Group;

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

Parameter weight(std::string name, std::size_t in, std::size_t out, Rng& rng, Group g = Group::backbone) {
  return Parameter(std::move(name), g, gaussian({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

Parameter zeros(std::string name, std::size_t n, Group g = Group::backbone) {
  return Parameter(std::move(name), g, Tensor({n}));
}

Parameter ones(std::string name, std::size_t n) {
  return Parameter(std::move(name), Group::backbone, Tensor::filled({n}, 1.0));
}

}  // namespace

void BackboneConfig::validate() const {
  if (layers < 1) throw ContractError("backbone: layers must be >= 1");
  if (dim < 1 || heads < 1 || dim % heads != 0) throw ContractError("backbone: heads must divide dim");
  if (grid_side < 1) throw ContractError("backbone: grid_side must be >= 1");
  if (patch_dim < 1 || mlp_ratio < 1) throw ContractError("backbone: patch_dim and mlp_ratio must be >= 1");
}

void TokenSequence::validate(std::size_t num_patches) const {
  if (orig_index.empty() || orig_index.front() != 1) {
    throw ContractError("token sequence: class token (index 1) must come first");
  }
  if (embeddings.rank() != 2 || embeddings.dim(0) != orig_index.size()) {
    throw DimensionError("token sequence: " + std::to_string(orig_index.size()) + " indices for embeddings " +
                         shape_str(embeddings.shape()));
  }
  std::vector<bool> seen(num_patches + 2, false);
  for (std::size_t i = 1; i < orig_index.size(); ++i) {
    const int idx = orig_index[i];
    if (idx < 2 || static_cast<std::size_t>(idx) > num_patches + 1) {
      throw IndexError("token sequence: patch index " + std::to_string(idx) + " outside [2, " +
                       std::to_string(num_patches + 1) + "]");
    }
    if (seen[static_cast<std::size_t>(idx)]) {
      throw ContractError("token sequence: duplicate patch index " + std::to_string(idx));
    }
    seen[static_cast<std::size_t>(idx)] = true;
  }
}

TrainableSet TrainableSet::of(std::initializer_list<Group> groups) {
  TrainableSet s;
  for (Group g : groups) s.mask_ |= ad::bit(g);
  return s;
}

TrainableSet TrainableSet::parse(const std::vector<std::string>& names) {
  TrainableSet s;
  for (const auto& n : names) {
    if (n == "prompt") s.mask_ |= ad::bit(Group::prompt);
    else if (n == "classifier") s.mask_ |= ad::bit(Group::classifier);
    else throw ContractError("unknown parameter group '" + n + "'");
  }
  return s;
}

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.dim, m = config_.hidden(), n = config_.num_patches();
  patch_w_ = weight("embed.patch_w", config_.patch_dim, d, rng);
  patch_b_ = zeros("embed.patch_b", d);
  cls_ = Parameter("embed.cls", Group::backbone, gaussian({1, d}, 0.02, rng));
  pos_ = Parameter("embed.pos", Group::backbone, gaussian({n + 1, d}, 0.02, rng));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    blocks_.push_back(BlockParams{
        ones(p + "ln1_g", d), zeros(p + "ln1_b", d),
        weight(p + "wq", d, d, rng), zeros(p + "bq", d),
        weight(p + "wk", d, d, rng), zeros(p + "bk", d),
        weight(p + "wv", d, d, rng), zeros(p + "bv", d),
        weight(p + "wo", d, d, rng), zeros(p + "bo", d),
        ones(p + "ln2_g", d), zeros(p + "ln2_b", d),
        weight(p + "w1", d, m, rng), zeros(p + "b1", m),
        weight(p + "w2", m, d, rng), zeros(p + "b2", d)});
  }
  final_g_ = ones("final.ln_g", d);
  final_b_ = zeros("final.ln_b", d);
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out{&patch_w_, &patch_b_, &cls_, &pos_};
  for (auto& b : blocks_) {
    for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                         &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_g_);
  out.push_back(&final_b_);
  return out;
}

std::vector<const Parameter*> Backbone::parameters() const {
  auto mut = const_cast<Backbone*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->numel();
  return n;
}

TokenSequence Backbone::embed(const Tensor& raw_grid) const {
  const std::size_t n = config_.num_patches();
  if (raw_grid.rank() != 2 || raw_grid.dim(0) != n || raw_grid.dim(1) != config_.patch_dim) {
    throw DimensionError("embed: expected grid [" + std::to_string(n) + "x" + std::to_string(config_.patch_dim) +
                         "], got " + shape_str(raw_grid.shape()));
  }
  const Tensor* grids[] = {&raw_grid};
  Tape tape;
  auto& self = const_cast<Backbone&>(*this);
  Var tokens = self.embed_batch(tape, grids, false);
  TokenSequence seq;
  seq.orig_index.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) seq.orig_index[i] = static_cast<int>(i + 1);
  seq.embeddings = tokens.value();
  return seq;
}

Var Backbone::embed_batch(Tape& tape, std::span<const Tensor* const> grids, bool trainable) {
  const std::size_t n = config_.num_patches(), pd = config_.patch_dim, batch = grids.size();
  Tensor raw({batch * n, pd});
  for (std::size_t b = 0; b < batch; ++b) {
    if (grids[b]->numel() != n * pd) throw DimensionError("embed_batch: grid size");
    std::copy_n(grids[b]->ptr(), n * pd, raw.ptr() + b * n * pd);
  }
  std::vector<int> index(batch * (n + 1));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i <= n; ++i) index[b * (n + 1) + i] = static_cast<int>(i + 1);
  Var patches = ad::add_bias(tape, ad::matmul(tape, tape.constant(std::move(raw)), tape.watch(patch_w_, trainable)),
                             tape.watch(patch_b_, trainable));
  return ad::assemble_tokens(tape, patches, tape.watch(cls_, trainable), tape.watch(pos_, trainable), index, batch);
}

Var Backbone::encode(Tape& tape, const Var& tokens, std::size_t batch, const PromptPrefix* prefix,
                     bool trainable, Tensor* final_probs, Tensor* final_values) {
  if (tokens.value().rank() != 2 || tokens.shape()[1] != config_.dim) {
    throw DimensionError("encode: tokens must be [batch*n x " + std::to_string(config_.dim) + "]");
  }
  if (prefix) {
    for (const auto& [layer, lp] : prefix->layers) {
      if (layer >= config_.layers) throw ContractError("encode: prefix for block " + std::to_string(layer));
    }
  }
  auto w = [&](Parameter& p) { return tape.watch(p, trainable); };
  Var x = tokens;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    BlockParams& bp = blocks_[l];
    const bool last = l + 1 == blocks_.size();
    Var h = ad::layer_norm(tape, x, w(bp.ln1_g), w(bp.ln1_b));
    Var q = ad::add_bias(tape, ad::matmul(tape, h, w(bp.wq)), w(bp.bq));
    Var k = ad::add_bias(tape, ad::matmul(tape, h, w(bp.wk)), w(bp.bk));
    Var v = ad::add_bias(tape, ad::matmul(tape, h, w(bp.wv)), w(bp.bv));
    if (last && final_values) *final_values = v.value();

    const LayerPrefix* lp = nullptr;
    if (prefix && prefix->length > 0) {
      auto it = prefix->layers.find(l);
      if (it != prefix->layers.end()) lp = &it->second;
    }
    ad::AttentionShape shape{batch, config_.heads, lp ? prefix->length : 0};
    Var a = ad::attention(tape, q, k, v, shape, lp ? &lp->keys : nullptr, lp ? &lp->values : nullptr,
                          last ? final_probs : nullptr);
    Var o = ad::add_bias(tape, ad::matmul(tape, a, w(bp.wo)), w(bp.bo));
    x = ad::add(tape, x, o);

    Var h2 = ad::layer_norm(tape, x, w(bp.ln2_g), w(bp.ln2_b));
    Var u = ad::add_bias(tape, ad::matmul(tape, h2, w(bp.w1)), w(bp.b1));
    Var mlp = ad::add_bias(tape, ad::matmul(tape, ad::gelu(tape, u), w(bp.w2)), w(bp.b2));
    x = ad::add(tape, x, mlp);
  }
  return ad::layer_norm(tape, x, w(final_g_), w(final_b_));
}

QueryResult Backbone::query_forward(const TokenSequence& seq) const {
  auto out = query_forward_batch(std::span<const TokenSequence>(&seq, 1));
  return std::move(out.front());
}

std::vector<QueryResult> Backbone::query_forward_batch(std::span<const TokenSequence> seqs) const {
  const std::size_t n = config_.num_patches();
  for (const auto& s : seqs) {
    s.validate(n);
    if (s.size() != n + 1) throw ContractError("query_forward: the query pass needs the full sequence");
  }
  const std::size_t batch = seqs.size(), tokens = n + 1, d = config_.dim, heads = config_.heads;
  Tape tape;
  Tensor probs, values;
  auto& self = const_cast<Backbone&>(*this);
  Var feats = self.encode(tape, tape.constant(stack_tokens(seqs)), batch, nullptr, false, &probs, &values);

  std::vector<QueryResult> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    QueryResult& r = out[b];
    r.z_q = Tensor({d});
    std::copy_n(feats.value().ptr() + b * tokens * d, d, r.z_q.ptr());
    r.trace.cls_to_patch.assign(n, 0.0);
    r.trace.value_norms.assign(n, 0.0);
    for (std::size_t pos = 1; pos < tokens; ++pos) {
      const auto patch = static_cast<std::size_t>(seqs[b].orig_index[pos] - 2);
      double a = 0.0;
      for (std::size_t h = 0; h < heads; ++h) a += probs[((b * heads + h) * tokens + 0) * tokens + pos];
      r.trace.cls_to_patch[patch] = a;
      double sq = 0.0;
      const double* vrow = values.ptr() + (b * tokens + pos) * d;
      for (std::size_t j = 0; j < d; ++j) sq += vrow[j] * vrow[j];
      r.trace.value_norms[patch] = std::sqrt(sq);
    }
  }
  return out;
}

Classifier::Classifier(std::size_t dim, std::size_t classes, Rng& rng)
    : w_("head.w", Group::classifier, gaussian({dim, classes}, 0.02, rng)),
      b_("head.b", Group::classifier, Tensor({classes})) {}

Var Classifier::forward(Tape& tape, const Var& features, bool trainable) {
  return ad::add_bias(tape, ad::matmul(tape, features, tape.watch(w_, trainable)), tape.watch(b_, trainable));
}

Tensor stack_tokens(std::span<const TokenSequence> seqs) {
  if (seqs.empty()) throw ContractError("stack_tokens: empty batch");
  const std::size_t n = seqs.front().size(), d = seqs.front().embeddings.dim(1);
  Tensor out({seqs.size() * n, d});
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    if (seqs[b].size() != n) throw DimensionError("stack_tokens: sequences in a batch must have equal length");
    std::copy_n(seqs[b].embeddings.ptr(), n * d, out.ptr() + b * n * d);
  }
  return out;
}

namespace {

Var class_rows(Tape& tape, const Var& feats, std::size_t batch, std::size_t tokens) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * tokens;
  return ad::gather_rows(tape, feats, rows);
}

}  // namespace

Var prompt_features(Tape& tape, Backbone& backbone, std::span<const TokenSequence> batch,
                    const PromptPrefix* prefix) {
  if (batch.empty()) throw ContractError("prompt_features: empty batch");
  for (const auto& s : batch) s.validate(backbone.config().num_patches());
  const std::size_t tokens = batch.front().size();
  Var feats = backbone.encode(tape, tape.constant(stack_tokens(batch)), batch.size(), prefix, false);
  return class_rows(tape, feats, batch.size(), tokens);
}

Var prompt_forward(Tape& tape, Backbone& backbone, Classifier& head, std::span<const TokenSequence> batch,
                   const PromptPrefix* prefix, TrainableSet trainable) {
  if (trainable.contains(Group::backbone)) {
    throw ContractError("prompt_forward: the backbone is frozen; trainable must be within {prompt, classifier}");
  }
  return head.forward(tape, prompt_features(tape, backbone, batch, prefix), trainable.contains(Group::classifier));
}

Var backbone_forward(Tape& tape, Backbone& backbone, Classifier& head, std::span<const Tensor* const> grids,
                     bool trainable) {
  Var tokens = backbone.embed_batch(tape, grids, trainable);
  Var feats = backbone.encode(tape, tokens, grids.size(), nullptr, trainable);
  return head.forward(tape, class_rows(tape, feats, grids.size(), backbone.config().num_patches() + 1), trainable);
}

}  // namespace cpsp::vit
