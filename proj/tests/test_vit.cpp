#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "cpsprompt/checkpoint.hpp"
#include "cpsprompt/errors.hpp"
#include "cpsprompt/prompt_pool.hpp"
#include "cpsprompt/vit.hpp"
#include "doctest.h"

using namespace cpsp;
using namespace cpsp::vit;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.grid_side = 3;
  c.patch_dim = 5;
  return c;
}

Tensor random_grid(const BackboneConfig& c, Rng& rng) {
  Tensor g({c.num_patches(), c.patch_dim});
  for (double& v : g.data()) v = rng.normal();
  return g;
}

Parameter* find(Backbone& bb, const std::string& name) {
  for (auto* p : bb.parameters())
    if (p->name == name) return p;
  FAIL("no parameter " << name);
  return nullptr;
}

// Reverses the patch order, keeping the class token first.
TokenSequence reversed_patches(const TokenSequence& s) {
  TokenSequence out = s;
  const std::size_t d = s.embeddings.dim(1), n = s.size();
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t src = n - i;
    out.orig_index[i] = s.orig_index[src];
    std::copy_n(s.embeddings.ptr() + src * d, d, out.embeddings.ptr() + i * d);
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  BackboneConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = tiny_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = tiny_config();
  c.grid_side = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("embed: zero weights give a zero sequence of length N+1") {
  Rng rng(1);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  for (const char* n : {"embed.patch_w", "embed.patch_b", "embed.cls", "embed.pos"}) find(bb, n)->value.fill(0.0);
  const TokenSequence seq = bb.embed(random_grid(c, rng));
  CHECK(seq.size() == c.num_patches() + 1);
  CHECK(seq.embeddings.shape() == Shape{c.num_patches() + 1, c.dim});
  for (double v : seq.embeddings.data()) CHECK(v == 0.0);
  for (std::size_t i = 0; i < seq.size(); ++i) CHECK(seq.orig_index[i] == static_cast<int>(i + 1));
}

TEST_CASE("embed: shape law and dimension errors") {
  Rng rng(2);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  for (int i = 0; i < 3; ++i) CHECK(bb.embed(random_grid(c, rng)).size() == c.num_patches() + 1);
  CHECK_THROWS_AS(bb.embed(Tensor({c.num_patches() + 1, c.patch_dim})), DimensionError);
  CHECK_THROWS_AS(bb.embed(Tensor({c.num_patches(), c.patch_dim + 1})), DimensionError);
}

TEST_CASE("embed: positional terms separate identical patches") {
  Rng rng(3);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  Tensor& pos = find(bb, "embed.pos")->value;
  for (std::size_t r = 0; r < pos.dim(0); ++r)
    for (std::size_t j = 0; j < pos.dim(1); ++j) pos.at(r, j) = static_cast<double>(r) + 0.01 * j;
  Tensor grid({c.num_patches(), c.patch_dim});
  grid.fill(0.5);
  const TokenSequence seq = bb.embed(grid);
  const std::size_t d = c.dim;
  for (std::size_t a = 1; a < seq.size(); ++a) {
    for (std::size_t b = a + 1; b < seq.size(); ++b) {
      const bool same = std::equal(seq.embeddings.ptr() + a * d, seq.embeddings.ptr() + (a + 1) * d,
                                   seq.embeddings.ptr() + b * d);
      CHECK_FALSE(same);
    }
  }
}

TEST_CASE("token sequence invariants are enforced") {
  Rng rng(4);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  TokenSequence seq = bb.embed(random_grid(c, rng));
  CHECK_NOTHROW(seq.validate(c.num_patches()));
  TokenSequence dup = seq;
  dup.orig_index[2] = dup.orig_index[1];
  CHECK_THROWS(dup.validate(c.num_patches()));
  TokenSequence no_cls = seq;
  std::swap(no_cls.orig_index[0], no_cls.orig_index[1]);
  CHECK_THROWS(no_cls.validate(c.num_patches()));
  TokenSequence out_of_range = seq;
  out_of_range.orig_index[1] = static_cast<int>(c.num_patches()) + 2;
  CHECK_THROWS(out_of_range.validate(c.num_patches()));
}

TEST_CASE("query trace: shapes, ranges, determinism") {
  Rng rng(5);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const QueryResult a = bb.query_forward(seq);
  const QueryResult b = bb.query_forward(seq);
  CHECK(a.z_q.shape() == Shape{c.dim});
  CHECK(a.trace.cls_to_patch.size() == c.num_patches());
  CHECK(a.trace.value_norms.size() == c.num_patches());
  CHECK(a.trace.cls_to_patch == b.trace.cls_to_patch);
  CHECK(a.trace.value_norms == b.trace.value_norms);
  CHECK(a.z_q == b.z_q);
  double total = 0.0;
  for (double v : a.trace.cls_to_patch) {
    CHECK(v >= 0.0);
    total += v;
  }
  CHECK(total <= static_cast<double>(c.heads));
  for (double v : a.trace.value_norms) CHECK(v >= 0.0);

  TokenSequence sparse = seq;
  sparse.orig_index.pop_back();
  sparse.embeddings = Tensor({seq.size() - 1, c.dim});
  CHECK_THROWS_AS(bb.query_forward(sparse), ContractError);
}

TEST_CASE("query trace: head-summed class row matches a hand-built single block") {
  Rng rng(6);
  BackboneConfig c = tiny_config();
  c.layers = 1;
  Backbone bb(c, rng);
  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const QueryResult r = bb.query_forward(seq);

  // Oracle: layer norm, projections and per-head softmax written out directly.
  const std::size_t n = seq.size(), d = c.dim, dh = c.head_dim();
  const Tensor& x = seq.embeddings;
  const Tensor& g = find(bb, "block0.ln1_g")->value;
  const Tensor& be = find(bb, "block0.ln1_b")->value;
  Tensor h({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j) / d;
    for (std::size_t j = 0; j < d; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean) / d;
    for (std::size_t j = 0; j < d; ++j) h.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + 1e-6) * g[j] + be[j];
  }
  auto project = [&](const char* w, const char* b) {
    const Tensor& W = find(bb, w)->value;
    const Tensor& B = find(bb, b)->value;
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = B[j];
        for (std::size_t p = 0; p < d; ++p) s += h.at(i, p) * W.at(p, j);
        out.at(i, j) = s;
      }
    return out;
  };
  const Tensor q = project("block0.wq", "block0.bq");
  const Tensor k = project("block0.wk", "block0.bk");
  const Tensor v = project("block0.wv", "block0.bv");
  std::vector<double> expect(n - 1, 0.0);
  for (std::size_t head = 0; head < c.heads; ++head) {
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t e = 0; e < dh; ++e) dot += q.at(0, head * dh + e) * k.at(j, head * dh + e);
      s[j] = dot / std::sqrt(static_cast<double>(dh));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 1; j < n; ++j) expect[j - 1] += s[j] / z;
  }
  for (std::size_t j = 0; j + 1 < n; ++j) {
    CHECK(std::abs(r.trace.cls_to_patch[j] - expect[j]) < 1e-12);
    double sq = 0.0;
    for (std::size_t e = 0; e < d; ++e) sq += v.at(j + 1, e) * v.at(j + 1, e);
    CHECK(std::abs(r.trace.value_norms[j] - std::sqrt(sq)) < 1e-12);
  }
}

TEST_CASE("query trace follows orig_index under patch permutation") {
  Rng rng(7);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const QueryResult a = bb.query_forward(seq);
  const QueryResult b = bb.query_forward(reversed_patches(seq));
  for (std::size_t j = 0; j < c.num_patches(); ++j) {
    CHECK(std::abs(a.trace.cls_to_patch[j] - b.trace.cls_to_patch[j]) < 1e-12);
    CHECK(std::abs(a.trace.value_norms[j] - b.trace.value_norms[j]) < 1e-12);
  }
  CHECK(max_abs_diff(a.z_q, b.z_q) < 1e-12);
}

TEST_CASE("attention rows are distributions") {
  Rng rng(8);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  std::vector<TokenSequence> batch{bb.embed(random_grid(c, rng)), bb.embed(random_grid(c, rng))};
  Tape tape;
  Tensor probs;
  bb.encode(tape, tape.constant(stack_tokens(batch)), batch.size(), nullptr, false, &probs);
  const std::size_t m = batch[0].size();
  REQUIRE(probs.numel() == batch.size() * c.heads * m * m);
  for (std::size_t row = 0; row < probs.numel() / m; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      CHECK(probs[row * m + j] >= 0.0);
      s += probs[row * m + j];
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("prompt_forward: logits invariant under patch permutation, with and without a prefix") {
  Rng rng(9);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  Classifier head(c.dim, 5, rng);
  pool::PoolConfig pc;
  pc.prompt_length = 3;
  pool::PromptPool pool(pc, c.dim);
  pool.expand_for_task(0, rng);

  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const TokenSequence perm = reversed_patches(seq);
  const Tensor zq = bb.query_forward(seq).z_q.reshaped({1, c.dim});
  for (bool with_prefix : {false, true}) {
    Tape t1, t2;
    PromptPrefix p1 = pool.compose(t1, t1.constant(zq));
    PromptPrefix p2 = pool.compose(t2, t2.constant(zq));
    const Var a = prompt_forward(t1, bb, head, std::span(&seq, 1), with_prefix ? &p1 : nullptr, TrainableSet::none());
    const Var b = prompt_forward(t2, bb, head, std::span(&perm, 1), with_prefix ? &p2 : nullptr, TrainableSet::none());
    CHECK(max_abs_diff(a.value(), b.value()) < 1e-9);
  }
}

TEST_CASE("prompt_forward without a prefix equals the plain frozen forward") {
  Rng rng(10);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  Classifier head(c.dim, 4, rng);
  const Tensor g1 = random_grid(c, rng), g2 = random_grid(c, rng);
  std::vector<TokenSequence> seqs{bb.embed(g1), bb.embed(g2)};
  const Tensor* grids[] = {&g1, &g2};
  Tape t1, t2;
  const Var a = prompt_forward(t1, bb, head, seqs, nullptr, TrainableSet::none());
  const Var b = backbone_forward(t2, bb, head, grids, false);
  CHECK(a.value() == b.value());
  CHECK(t1.node_count() == 0);
}

TEST_CASE("prompt_forward: freeze contracts") {
  Rng rng(11);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  Classifier head(c.dim, 3, rng);
  pool::PoolConfig pc;
  pc.prompt_length = 2;
  pool::PromptPool pool(pc, c.dim);
  pool.expand_for_task(0, rng);
  std::vector<Tensor> before;
  for (const auto* p : std::as_const(bb).parameters()) before.push_back(p->value);

  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const Tensor zq = bb.query_forward(seq).z_q.reshaped({1, c.dim});
  for (auto* p : pool.parameters()) p->zero_grad();
  for (auto* p : head.parameters()) p->zero_grad();

  SUBCASE("classifier only: prompt gradients stay zero") {
    pool.set_frozen(true);
    Tape tape;
    PromptPrefix prefix = pool.compose(tape, tape.constant(zq));
    const Var logits = prompt_forward(tape, bb, head, std::span(&seq, 1), &prefix, TrainableSet::of({ad::Group::classifier}));
    CHECK(tape.census(ad::bit(ad::Group::prompt)) == 0);
    tape.backward(ad::cross_entropy(tape, logits, {1}));
    for (auto* p : pool.parameters())
      for (double g : p->grad.data()) CHECK(g == 0.0);
    double head_mass = 0.0;
    for (auto* p : head.parameters())
      for (double g : p->grad.data()) head_mass += std::abs(g);
    CHECK(head_mass > 0.0);
  }
  SUBCASE("prompt and classifier: prompts receive gradient") {
    Tape tape;
    PromptPrefix prefix = pool.compose(tape, tape.constant(zq));
    const Var logits = prompt_forward(tape, bb, head, std::span(&seq, 1), &prefix,
                                      TrainableSet::of({ad::Group::prompt, ad::Group::classifier}));
    tape.backward(ad::cross_entropy(tape, logits, {0}));
    double mass = 0.0;
    for (auto* p : pool.parameters())
      for (double g : p->grad.data()) mass += std::abs(g);
    CHECK(mass > 0.0);
  }
  SUBCASE("backbone group is rejected") {
    Tape tape;
    CHECK_THROWS_AS(prompt_forward(tape, bb, head, std::span(&seq, 1), nullptr, TrainableSet::of({ad::Group::backbone})),
                    ContractError);
  }
  std::size_t i = 0;
  for (const auto* p : std::as_const(bb).parameters()) CHECK(p->value == before[i++]);
  for (const auto* p : std::as_const(bb).parameters())
    for (double g : p->grad.data()) CHECK(g == 0.0);
}

TEST_CASE("trainable set parsing") {
  CHECK(TrainableSet::parse({}).empty());
  CHECK(TrainableSet::parse({"prompt", "classifier"}) ==
        TrainableSet::of({ad::Group::prompt, ad::Group::classifier}));
  CHECK_THROWS_AS(TrainableSet::parse({"backbone"}), ContractError);
  CHECK_THROWS_AS(TrainableSet::parse({"prompts"}), ContractError);
}

TEST_CASE("checkpoint round trip reproduces query traces") {
  Rng rng(12);
  const BackboneConfig c = tiny_config();
  Backbone bb(c, rng);
  const auto dir = std::filesystem::temp_directory_path() / "cpsp_test_vit_ckpt";
  std::filesystem::create_directories(dir);
  io::save_checkpoint(dir / "bb", std::as_const(bb).parameters(), {{"note", "test"}});

  Rng other(99);
  Backbone copy(c, other);
  const TokenSequence seq = bb.embed(random_grid(c, rng));
  const auto ckpt = io::load_checkpoint(dir / "bb");
  CHECK(ckpt.meta.at("note") == "test");
  auto params = copy.parameters();
  io::restore(ckpt, params);
  const QueryResult a = bb.query_forward(seq);
  const QueryResult r = copy.query_forward(seq);
  CHECK(a.z_q == r.z_q);
  CHECK(a.trace.cls_to_patch == r.trace.cls_to_patch);
  CHECK(a.trace.value_norms == r.trace.value_norms);

  BackboneConfig wider = c;
  wider.dim = 12;
  Backbone mismatched(wider, other);
  auto mp = mismatched.parameters();
  CHECK_THROWS_AS(io::restore(ckpt, mp), DataError);

  Classifier head(c.dim, 3, other);
  auto hp = head.parameters();
  CHECK_THROWS_AS(io::restore(ckpt, hp), DataError);
  CHECK_THROWS_AS(io::load_checkpoint(dir / "missing"), DataError);
  std::filesystem::remove_all(dir);
}
