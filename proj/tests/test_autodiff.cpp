#include <cmath>

#include "cpsprompt/autodiff.hpp"
#include "cpsprompt/errors.hpp"
#include "cpsprompt/rng.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cpsp;
using namespace cpsp::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

Parameter param(const char* name, Shape shape, Rng& rng, Group g = Group::prompt, double scale = 0.5) {
  return Parameter(name, g, random_tensor(std::move(shape), rng, scale));
}

}  // namespace

TEST_CASE("matmul examples") {
  Tape t;
  auto id = t.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
  auto b = t.constant(Tensor::from_rows({{3, 4}, {5, 6}}));
  CHECK(matmul(t, id, b).value() == Tensor::from_rows({{3, 4}, {5, 6}}));

  auto row = t.constant(Tensor::from_rows({{1, 2}}));
  auto col = t.constant(Tensor::from_rows({{3}, {4}}));
  CHECK(matmul(t, row, col).value()[0] == 11.0);

  auto a23 = t.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(matmul(t, a23, a23), DimensionError);
}

TEST_CASE("softmax_rows values") {
  Tape t;
  auto u = softmax_rows(t, t.constant(Tensor::from_rows({{0, 0, 0}})));
  for (int j = 0; j < 3; ++j) CHECK(u.value()[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto p = softmax_rows(t, t.constant(Tensor::from_rows({{15, 10}})));
  const double oracle = std::exp(5.0) / (std::exp(5.0) + 1.0);
  CHECK(std::abs(p.value()[0] - oracle) < 1e-15);
  CHECK(std::abs(p.value()[0] - 0.993307) < 1e-6);
  CHECK(std::abs(p.value()[1] - 0.006693) < 1e-6);

  const double c = 123.25, delta = 0.75;
  auto s1 = softmax_rows(t, t.constant(Tensor::from_rows({{c, c + delta}})));
  auto s2 = softmax_rows(t, t.constant(Tensor::from_rows({{0, delta}})));
  CHECK(std::abs(s1.value()[0] - s2.value()[0]) < 1e-15);
  CHECK(std::abs(s1.value()[0] + s1.value()[1] - 1.0) < 1e-12);
}

TEST_CASE("cross_entropy examples") {
  Tape t;
  auto uniform = cross_entropy(t, t.constant(Tensor({2, 4})), {0, 3});
  CHECK(std::abs(uniform.value()[0] - std::log(4.0)) < 1e-12);

  auto sharp = cross_entropy(t, t.constant(Tensor::from_rows({{10, -10}})), {0});
  const double oracle = std::log1p(std::exp(-20.0));  // -ln sigmoid(20)
  CHECK(sharp.value()[0] == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(std::abs(sharp.value()[0] - 2.06e-9) < 0.01e-9);

  CHECK_THROWS_AS(cross_entropy(t, t.constant(Tensor({1, 4})), {4}), IndexError);
  CHECK_THROWS_AS(cross_entropy(t, t.constant(Tensor({1, 4})), {-1}), IndexError);
}

TEST_CASE("cross_entropy with a class mask ignores masked logits") {
  Tape t;
  std::vector<bool> allowed{false, true, true, false};
  auto masked = cross_entropy(t, t.constant(Tensor::from_rows({{50, 1, 1, -3}})), {1}, &allowed);
  CHECK(std::abs(masked.value()[0] - std::log(2.0)) < 1e-12);
  CHECK_THROWS_AS(cross_entropy(t, t.constant(Tensor({1, 4})), {0}, &allowed), IndexError);
}

TEST_CASE("backward on simple closed forms") {
  Rng rng(1);
  auto w = param("w", {3, 2}, rng);
  {
    Tape t;
    t.backward(sum(t, t.watch(w, true)));
    for (double g : w.grad.data()) CHECK(g == 1.0);
  }
  w.zero_grad();
  {
    Tape t;
    auto wv = t.watch(w, true);
    t.backward(sum(t, mul(t, wv, wv)));
    for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w.grad[i] == doctest::Approx(2.0 * w.value[i]));
  }
}

TEST_CASE("backward contract") {
  Rng rng(2);
  auto w = param("w", {2, 2}, rng);
  auto unused = param("unused", {2}, rng);
  unused.grad.fill(7.0);
  Tape t;
  auto wv = t.watch(w, true);
  t.watch(unused, true);
  CHECK_THROWS_AS(t.backward(scale(t, wv, 2.0)), ContractError);
  t.backward(sum(t, wv));
  CHECK(unused.grad == Tensor::filled({2}, 7.0));
  CHECK(t.node_count() == 0);
  CHECK(t.live_elements() == 0);
}

TEST_CASE("non-finite values abort the operation") {
  Tape t;
  auto x = t.constant(Tensor::filled({2}, 10.0));
  CHECK_THROWS_AS(scale(t, x, 1e308), NumericError);
}

TEST_CASE("three-layer MLP gradients match central differences") {
  Rng rng(42);
  auto x = random_tensor({6, 5}, rng);
  auto w1 = param("w1", {5, 7}, rng);
  auto b1 = param("b1", {7}, rng);
  auto w2 = param("w2", {7, 7}, rng);
  auto b2 = param("b2", {7}, rng);
  auto w3 = param("w3", {7, 4}, rng);
  auto b3 = param("b3", {4}, rng);
  const std::vector<int> labels{0, 3, 1, 2, 2, 0};
  auto loss = [&](Tape& t) {
    auto h = gelu(t, add_bias(t, matmul(t, t.constant(x), t.watch(w1, true)), t.watch(b1, true)));
    h = gelu(t, add_bias(t, matmul(t, h, t.watch(w2, true)), t.watch(b2, true)));
    auto logits = add_bias(t, matmul(t, h, t.watch(w3, true)), t.watch(b3, true));
    return cross_entropy(t, logits, labels);
  };
  auto r = testing::grad_check({&w1, &b1, &w2, &b2, &w3, &b3}, loss);
  CHECK(r.checked == 5 * 7 + 7 + 49 + 7 + 28 + 4);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("layer_norm, softmax and gather gradients match central differences") {
  Rng rng(9);
  auto x = param("x", {4, 6}, rng, Group::prompt, 1.0);
  auto g = param("g", {6}, rng);
  auto b = param("b", {6}, rng);
  auto loss = [&](Tape& t) {
    auto y = layer_norm(t, t.watch(x, true), t.watch(g, true), t.watch(b, true));
    auto s = softmax_rows(t, y);
    auto picked = gather_rows(t, s, {3, 0, 3});
    return cross_entropy(t, picked, {1, 5, 2});
  };
  CHECK(testing::grad_check({&x, &g, &b}, loss).max_rel_error < 1e-4);
}

TEST_CASE("attention with prefix rows matches central differences") {
  Rng rng(17);
  const std::size_t batch = 2, n = 3, pre = 2, dim = 4;
  auto q = param("q", {batch * n, dim}, rng, Group::backbone, 1.0);
  auto k = param("k", {batch * n, dim}, rng, Group::backbone, 1.0);
  auto v = param("v", {batch * n, dim}, rng, Group::backbone, 1.0);
  auto pk = param("pk", {batch * pre, dim}, rng, Group::prompt, 1.0);
  auto pv = param("pv", {batch * pre, dim}, rng, Group::prompt, 1.0);
  auto w = random_tensor({dim, 3}, rng);
  auto loss = [&](Tape& t) {
    auto pkv = t.watch(pk, true);
    auto pvv = t.watch(pv, true);
    auto a = attention(t, t.watch(q, true), t.watch(k, true), t.watch(v, true), {batch, 2, pre}, &pkv, &pvv);
    auto logits = matmul(t, a, t.constant(w));
    return cross_entropy(t, logits, {0, 1, 2, 2, 1, 0});
  };
  CHECK(testing::grad_check({&q, &k, &v, &pk, &pv}, loss).max_rel_error < 1e-4);
}

TEST_CASE("assemble_tokens and cosine_weights gradients match central differences") {
  Rng rng(23);
  auto patches = param("patches", {4, 3}, rng, Group::backbone, 1.0);
  auto cls = param("cls", {1, 3}, rng);
  auto pos = param("pos", {4, 3}, rng);
  auto attn = param("attn", {2, 3}, rng, Group::prompt, 1.0);
  auto keys = param("keys", {2, 3}, rng, Group::prompt, 1.0);
  // two samples, each class token + 2 patches in shuffled positions
  const std::vector<int> index{1, 4, 2, 1, 3, 4};
  auto loss = [&](Tape& t) {
    auto tokens = assemble_tokens(t, t.watch(patches, true), t.watch(cls, true), t.watch(pos, true), index, 2);
    auto alpha = cosine_weights(t, tokens, t.watch(attn, true), t.watch(keys, true));
    return cross_entropy(t, alpha, {0, 1, 1, 0, 1, 0});
  };
  CHECK(testing::grad_check({&patches, &cls, &pos, &attn, &keys}, loss).max_rel_error < 1e-4);
}

TEST_CASE("cosine_weights treats zero norms as zero similarity") {
  Tape t;
  auto zq = t.constant(Tensor::from_rows({{0, 0}, {1, 0}}));
  auto attn = t.constant(Tensor::from_rows({{1, 1}}));
  auto keys = t.constant(Tensor::from_rows({{1, 0}}));
  auto a = cosine_weights(t, zq, attn, keys);
  CHECK(a.value()[0] == 0.0);
  CHECK(a.value()[1] == doctest::Approx(1.0));
  auto zero_key = cosine_weights(t, zq, attn, t.constant(Tensor({1, 2})));
  CHECK(zero_key.value()[1] == 0.0);
}

TEST_CASE("retention follows the documented policy") {
  Rng rng(4);
  auto w = param("w", {3, 2}, rng, Group::classifier);
  auto frozen = param("frozen", {3, 3}, rng, Group::backbone);
  Tape t;
  auto x = t.constant(random_tensor({5, 3}, rng));
  // frozen weight, constant input: nothing is recorded
  auto h = matmul(t, x, t.watch(frozen, false));
  CHECK(t.node_count() == 0);
  CHECK(t.live_elements() == 0);
  // trainable weight: the 5x3 activation is retained, the weight is not counted
  auto y = matmul(t, h, t.watch(w, true));
  CHECK(t.live_elements() == 15);
  // the same activation retained twice counts once
  auto y2 = matmul(t, h, t.watch(w, true));
  CHECK(t.live_elements() == 15);
  auto s = softmax_rows(t, add(t, y, y2));
  CHECK(t.live_elements() == 15 + 10);
  CHECK(t.census() == t.live_elements());
  CHECK(t.census(bit(Group::prompt)) == 0);
  CHECK(t.census(bit(Group::classifier)) == 25);
  t.backward(sum(t, s));
  CHECK(t.live_elements() == 0);
}

TEST_CASE("live count equals an independent census on random graphs") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(seed);
    std::vector<Parameter> params;
    params.reserve(8);
    for (int i = 0; i < 8; ++i) params.push_back(param("p", {4, 4}, rng, i % 2 ? Group::prompt : Group::classifier));
    Tape t;
    std::vector<Var> pool{t.constant(random_tensor({4, 4}, rng))};
    for (int step = 0; step < 12; ++step) {
      const Var a = pool[rng.below(pool.size())];
      Parameter& p = params[rng.below(params.size())];
      const Var w = t.watch(p, rng.uniform() < 0.6);
      switch (rng.below(6)) {
        case 0: pool.push_back(matmul(t, a, w)); break;
        case 1: pool.push_back(add(t, a, w)); break;
        case 2: pool.push_back(mul(t, a, w)); break;
        case 3: pool.push_back(gelu(t, a)); break;
        case 4: pool.push_back(softmax_rows(t, a)); break;
        default: pool.push_back(layer_norm(t, a, t.constant(Tensor::filled({4}, 1.0)), t.constant(Tensor({4})))); break;
      }
      REQUIRE(t.live_elements() == t.census());
      CHECK(t.peak_live_elements() >= t.live_elements());
    }
  }
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
  auto run = [] {
    Rng rng(99);
    auto w = param("w", {8, 8}, rng);
    auto x = random_tensor({16, 8}, rng);
    Tape t;
    auto h = gelu(t, matmul(t, t.constant(x), t.watch(w, true)));
    auto loss = cross_entropy(t, h, std::vector<int>(16, 3));
    const double l = loss.value()[0];
    t.backward(loss);
    return std::pair{l, w.grad};
  };
  CHECK(run() == run());
}

TEST_CASE("MAC counters follow m*k*n") {
  Tape t;
  Rng rng(0);
  auto w = param("w", {3, 4}, rng);
  auto y = matmul(t, t.constant(Tensor({2, 3})), t.watch(w, true));
  CHECK(t.forward_macs() == 24);
  t.backward(sum(t, y));
  CHECK(t.backward_macs() == 24);  // only dW is needed
}
