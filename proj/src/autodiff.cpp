#include "cpsprompt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "cpsprompt/errors.hpp"
#include "cpsprompt/kernels.hpp"
#include "detail/simd_math.hpp"

namespace cpsp::ad {

const char* group_name(Group g) {
  switch (g) {
    case Group::prompt: return "prompt";
    case Group::classifier: return "classifier";
    case Group::backbone: return "backbone";
  }
  return "?";
}

Parameter::Parameter(std::string name_, Group group_, Tensor value_)
    : name(std::move(name_)), group(group_), value(std::move(value_)), grad(value.shape()) {}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor t) const { return constant(std::make_shared<const Tensor>(std::move(t))); }

Var Tape::constant(std::shared_ptr<const Tensor> t) const {
  Var v;
  v.value_ = std::move(t);
  return v;
}

Var Tape::watch(Parameter& p, bool trainable) {
  Var v;
  // Non-owning alias: parameters outlive any tape that references them.
  v.value_ = std::shared_ptr<const Tensor>(std::shared_ptr<void>(), &p.value);
  v.is_param_ = true;
  if (trainable) {
    v.slot_ = static_cast<int>(slots_.size());
    v.groups_ = bit(p.group);
    slots_.push_back(Slot{p.value.shape(), &p, std::nullopt});
  }
  return v;
}

void Tape::retain(const std::shared_ptr<const Tensor>& t) {
  auto [it, inserted] = retained_.try_emplace(t.get(), 0);
  if (it->second++ == 0) {
    live_ += t->numel();
    peak_ = std::max(peak_, live_);
  }
}

void Tape::release(const std::shared_ptr<const Tensor>& t) {
  auto it = retained_.find(t.get());
  if (it == retained_.end()) return;
  if (--it->second == 0) {
    live_ -= t->numel();
    retained_.erase(it);
  }
}

Var Tape::record(NodeSpec spec, Tensor out) {
  require_finite(out, spec.op);
  if (log_ops_) op_log_.emplace_back(spec.op);

  Var result;
  result.value_ = std::make_shared<const Tensor>(std::move(out));

  GroupMask groups = 0;
  bool any = false;
  for (const Var* in : spec.inputs) {
    if (in && in->requires_grad()) {
      any = true;
      groups |= in->groups_;
    }
  }
  if (!any) return result;

  Node node;
  node.op = spec.op;
  node.groups = groups;
  for (const Var* in : spec.inputs) node.inputs.push_back(in ? in->slot_ : -1);
  for (const Var* k : spec.keep) {
    if (!k) {
      node.refs.emplace_back();
      node.counted.push_back(false);
      continue;
    }
    node.refs.push_back(k->value_);
    node.counted.push_back(!k->is_param_);
  }
  for (Tensor& e : spec.extras) {
    node.refs.push_back(std::make_shared<const Tensor>(std::move(e)));
    node.counted.push_back(true);
  }
  if (spec.keep_output) {
    node.refs.push_back(result.value_);
    node.counted.push_back(true);
  }
  for (std::size_t i = 0; i < node.refs.size(); ++i) {
    if (node.counted[i]) retain(node.refs[i]);
  }

  result.slot_ = static_cast<int>(slots_.size());
  result.groups_ = groups;
  slots_.push_back(Slot{result.value_->shape(), nullptr, std::nullopt});
  node.output = result.slot_;
  node.backward = std::move(spec.backward);
  nodes_.push_back(std::move(node));
  return result;
}

void Tape::accumulate(int slot, Tensor grad) {
  if (slot < 0) return;
  Slot& s = slots_.at(static_cast<std::size_t>(slot));
  if (grad.shape() != s.shape) {
    throw DimensionError("backward: gradient " + shape_str(grad.shape()) + " for slot " +
                         shape_str(s.shape));
  }
  if (!s.grad) {
    s.grad = std::move(grad);
    return;
  }
  auto dst = s.grad->data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(const Var& loss) {
  if (!loss) throw ContractError("backward: empty loss");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any trainable value");

  accumulate(loss.slot_, Tensor::filled(loss.shape(), 1.0));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    Slot& out = slots_[static_cast<std::size_t>(node.output)];
    if (out.grad) {
      const Tensor g = std::move(*out.grad);
      out.grad.reset();
      node.backward(*this, node, g);
    }
    for (std::size_t i = 0; i < node.refs.size(); ++i) {
      if (node.counted[i]) release(node.refs[i]);
    }
    node.refs.clear();
  }
  for (Slot& s : slots_) {
    if (s.leaf && s.grad) {
      auto dst = s.leaf->grad.data();
      auto src = s.grad->data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  clear();
}

void Tape::clear() {
  nodes_.clear();
  slots_.clear();
  retained_.clear();
  live_ = 0;
}

std::size_t Tape::census() const { return census(static_cast<GroupMask>(0xff)); }

std::size_t Tape::census(GroupMask groups) const {
  std::unordered_set<const Tensor*> seen;
  std::size_t total = 0;
  for (const Node& node : nodes_) {
    if ((node.groups & groups) == 0) continue;
    for (std::size_t i = 0; i < node.refs.size(); ++i) {
      if (!node.counted[i] || !node.refs[i]) continue;
      if (seen.insert(node.refs[i].get()).second) total += node.refs[i]->numel();
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_rank2(const Var& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
  }
}

std::size_t bias_len(const Var& bias, const char* op) {
  const Shape& s = bias.shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2 && s[0] == 1) return s[1];
  throw DimensionError(std::string(op) + ": bias must be [n] or [1 x n], got " + shape_str(s));
}

// tanh-form GELU: 0.5 x (1 + tanh(u)) = x * sigmoid(2u), u = c (x + a x^3).
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

inline double gelu_gate(double x) { return 1.0 / (1.0 + detail::vexp(-2.0 * kGeluC * (x + kGeluA * x * x * x))); }

}  // namespace

Var matmul(Tape& t, const Var& a, const Var& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::matmul(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n);
  t.add_forward_macs(m * k * n);

  NodeSpec spec;
  spec.op = "matmul";
  spec.inputs = {&a, &b};
  spec.keep = {b.requires_grad() ? &a : nullptr, a.requires_grad() ? &b : nullptr};
  spec.backward = [m, k, n](Tape& tp, const Node& nd, const Tensor& g) {
    if (nd.input_requires_grad(0)) {
      Tensor da({m, k});
      kernels::matmul_nt(g.ptr(), nd.ref(1).ptr(), da.ptr(), m, n, k);
      tp.add_backward_macs(m * k * n);
      tp.accumulate(nd.inputs[0], std::move(da));
    }
    if (nd.input_requires_grad(1)) {
      Tensor db({k, n});
      kernels::matmul_tn_acc(nd.ref(0).ptr(), g.ptr(), db.ptr(), m, k, n);
      tp.add_backward_macs(m * k * n);
      tp.accumulate(nd.inputs[1], std::move(db));
    }
  };
  return t.record(std::move(spec), std::move(out));
}

Var add(Tape& t, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];

  NodeSpec spec;
  spec.op = "add";
  spec.inputs = {&a, &b};
  spec.backward = [](Tape& tp, const Node& nd, const Tensor& g) {
    tp.accumulate(nd.inputs[0], g);
    tp.accumulate(nd.inputs[1], g);
  };
  return t.record(std::move(spec), std::move(out));
}

Var add_bias(Tape& t, const Var& x, const Var& bias) {
  require_rank2(x, "add_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias_len(bias, "add_bias") != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  Tensor out = x.value();
  const double* bv = bias.value().ptr();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];

  NodeSpec spec;
  spec.op = "add_bias";
  spec.inputs = {&x, &bias};
  spec.backward = [m, n, bshape = bias.shape()](Tape& tp, const Node& nd, const Tensor& g) {
    tp.accumulate(nd.inputs[0], g);
    if (nd.input_requires_grad(1)) {
      Tensor db(bshape);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
      tp.accumulate(nd.inputs[1], std::move(db));
    }
  };
  return t.record(std::move(spec), std::move(out));
}

Var mul(Tape& t, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];

  NodeSpec spec;
  spec.op = "mul";
  spec.inputs = {&a, &b};
  spec.keep = {b.requires_grad() ? &a : nullptr, a.requires_grad() ? &b : nullptr};
  spec.backward = [](Tape& tp, const Node& nd, const Tensor& g) {
    for (int side = 0; side < 2; ++side) {
      if (!nd.input_requires_grad(side)) continue;
      const Tensor& other = nd.ref(1 - side);
      Tensor d = g;
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= other[i];
      tp.accumulate(nd.inputs[side], std::move(d));
    }
  };
  return t.record(std::move(spec), std::move(out));
}

Var scale(Tape& t, const Var& x, double c) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= c;
  NodeSpec spec;
  spec.op = "scale";
  spec.inputs = {&x};
  spec.backward = [c](Tape& tp, const Node& nd, const Tensor& g) {
    Tensor d = g;
    for (double& v : d.data()) v *= c;
    tp.accumulate(nd.inputs[0], std::move(d));
  };
  return t.record(std::move(spec), std::move(out));
}

Var sum(Tape& t, const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  NodeSpec spec;
  spec.op = "sum";
  spec.inputs = {&x};
  spec.backward = [shape = x.shape()](Tape& tp, const Node& nd, const Tensor& g) {
    tp.accumulate(nd.inputs[0], Tensor::filled(shape, g[0]));
  };
  return t.record(std::move(spec), Tensor({}, {s}));
}

Var gelu(Tape& t, const Var& x) {
  Tensor out = x.value();
  double* o = out.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < out.numel(); ++i) o[i] = o[i] * gelu_gate(o[i]);
  NodeSpec spec;
  spec.op = "gelu";
  spec.inputs = {&x};
  spec.keep = {&x};
  spec.backward = [](Tape& tp, const Node& nd, const Tensor& g) {
    const Tensor& in = nd.ref(0);
    Tensor d = g;
    double* dp = d.ptr();
    const double* ip = in.ptr();
#pragma omp simd
    for (std::size_t i = 0; i < d.numel(); ++i) {
      const double z = ip[i];
      const double sg = gelu_gate(z);
      dp[i] *= sg + z * sg * (1.0 - sg) * 2.0 * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
    }
    tp.accumulate(nd.inputs[0], std::move(d));
  };
  return t.record(std::move(spec), std::move(out));
}

Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  if (bias_len(gamma, "layer_norm") != d || bias_len(beta, "layer_norm") != d) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  }
  Tensor xhat({m, d});
  Tensor rstd({m});
  Tensor out({m, d});
  const double* xv = x.value().ptr();
  const double* gv = gamma.value().ptr();
  const double* bv = beta.value().ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * r;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }

  const bool need_stats = x.requires_grad() || gamma.requires_grad();
  NodeSpec spec;
  spec.op = "layer_norm";
  spec.inputs = {&x, &gamma, &beta};
  spec.keep = {x.requires_grad() ? &gamma : nullptr};
  if (need_stats) {
    spec.extras.push_back(std::move(xhat));
    spec.extras.push_back(std::move(rstd));
  }
  spec.backward = [m, d, gshape = gamma.shape(), bshape = beta.shape()](Tape& tp, const Node& nd,
                                                                         const Tensor& g) {
    if (nd.input_requires_grad(2)) {
      Tensor db(bshape);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
      tp.accumulate(nd.inputs[2], std::move(db));
    }
    if (!nd.input_requires_grad(0) && !nd.input_requires_grad(1)) return;
    const Tensor& xh = nd.ref(1);
    const Tensor& rs = nd.ref(2);
    if (nd.input_requires_grad(1)) {
      Tensor dg(gshape);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xh[i * d + j];
      tp.accumulate(nd.inputs[1], std::move(dg));
    }
    if (nd.input_requires_grad(0)) {
      const Tensor& gam = nd.ref(0);
      Tensor dx({m, d});
      for (std::size_t i = 0; i < m; ++i) {
        double mean_gh = 0.0, mean_ghx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[i * d + j] * gam[j];
          mean_gh += gh;
          mean_ghx += gh * xh[i * d + j];
        }
        mean_gh /= static_cast<double>(d);
        mean_ghx /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[i * d + j] * gam[j];
          dx[i * d + j] = rs[i] * (gh - mean_gh - xh[i * d + j] * mean_ghx);
        }
      }
      tp.accumulate(nd.inputs[0], std::move(dx));
    }
  };
  return t.record(std::move(spec), std::move(out));
}

Var softmax_rows(Tape& t, const Var& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.ptr() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  NodeSpec spec;
  spec.op = "softmax_rows";
  spec.inputs = {&x};
  spec.keep_output = true;
  spec.backward = [m, n](Tape& tp, const Node& nd, const Tensor& g) {
    const Tensor& y = nd.ref(0);
    Tensor dx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
    }
    tp.accumulate(nd.inputs[0], std::move(dx));
  };
  return t.record(std::move(spec), std::move(out));
}

Var reshape(Tape& t, const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  NodeSpec spec;
  spec.op = "reshape";
  spec.inputs = {&x};
  spec.backward = [in_shape = x.shape()](Tape& tp, const Node& nd, const Tensor& g) {
    tp.accumulate(nd.inputs[0], g.reshaped(in_shape));
  };
  return t.record(std::move(spec), std::move(out));
}

Var gather_rows(Tape& t, const Var& x, const std::vector<std::size_t>& rows) {
  require_rank2(x, "gather_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " >= " + std::to_string(m));
    std::copy_n(x.value().ptr() + rows[r] * n, n, out.ptr() + r * n);
  }
  NodeSpec spec;
  spec.op = "gather_rows";
  spec.inputs = {&x};
  spec.backward = [rows, m, n](Tape& tp, const Node& nd, const Tensor& g) {
    Tensor dx({m, n});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) dx[rows[r] * n + j] += g[r * n + j];
    tp.accumulate(nd.inputs[0], std::move(dx));
  };
  return t.record(std::move(spec), std::move(out));
}

Var cross_entropy(Tape& t, const Var& logits, const std::vector<int>& labels,
                  const std::vector<bool>* allowed) {
  require_rank2(logits, "cross_entropy");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  if (allowed && allowed->size() != c) throw DimensionError("cross_entropy: class mask size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    if (allowed && !(*allowed)[static_cast<std::size_t>(y)]) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " is masked out");
    }
  }
  Tensor probs({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.value().ptr() + i * c;
    std::size_t top = c;
    for (std::size_t j = 0; j < c; ++j)
      if ((!allowed || (*allowed)[j]) && (top == c || row[j] > row[top])) top = j;
    const double mx = row[top];
    // log-sum-exp as log1p of the non-maximal mass keeps tiny losses exact.
    double rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = (!allowed || (*allowed)[j]) ? std::exp(row[j] - mx) : 0.0;
      probs[i * c + j] = e;
      if (j != top) rest += e;
    }
    const double z = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    const auto y = static_cast<std::size_t>(labels[i]);
    loss += std::log1p(rest) - (row[y] - mx);
  }
  loss /= static_cast<double>(b);

  NodeSpec spec;
  spec.op = "cross_entropy";
  spec.inputs = {&logits};
  spec.extras.push_back(std::move(probs));
  spec.backward = [labels, b, c](Tape& tp, const Node& nd, const Tensor& g) {
    const Tensor& p = nd.ref(0);
    Tensor d({b, c});
    const double s = g[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] = p[i * c + j] * s;
      d[i * c + static_cast<std::size_t>(labels[i])] -= s;
    }
    tp.accumulate(nd.inputs[0], std::move(d));
  };
  return t.record(std::move(spec), Tensor({}, {loss}));
}

Var attention(Tape& t, const Var& q, const Var& k, const Var& v, const AttentionShape& shape,
              const Var* prefix_k, const Var* prefix_v, Tensor* probs_out) {
  require_rank2(q, "attention");
  const std::size_t bsz = shape.batch, heads = shape.heads, pre = shape.prefix;
  const std::size_t rows = q.shape()[0], dim = q.shape()[1];
  if (bsz == 0 || rows % bsz != 0) throw DimensionError("attention: rows not divisible by batch");
  if (heads == 0 || dim % heads != 0) throw DimensionError("attention: heads must divide feature dim");
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("attention: q/k/v shapes differ");
  if ((pre > 0) != (prefix_k != nullptr) || (prefix_k != nullptr) != (prefix_v != nullptr)) {
    throw ContractError("attention: prefix length and prefix tensors disagree");
  }
  const Shape pshape{bsz * pre, dim};
  if (prefix_k && (prefix_k->shape() != pshape || prefix_v->shape() != pshape)) {
    throw DimensionError("attention: prefix must be " + shape_str(pshape));
  }
  const std::size_t n = rows / bsz, m = n + pre;

  Tensor kcat({bsz * m, dim}), vcat({bsz * m, dim});
  for (std::size_t b = 0; b < bsz; ++b) {
    double* kd = kcat.ptr() + b * m * dim;
    double* vd = vcat.ptr() + b * m * dim;
    if (pre) {
      std::copy_n(prefix_k->value().ptr() + b * pre * dim, pre * dim, kd);
      std::copy_n(prefix_v->value().ptr() + b * pre * dim, pre * dim, vd);
    }
    std::copy_n(k.value().ptr() + b * n * dim, n * dim, kd + pre * dim);
    std::copy_n(v.value().ptr() + b * n * dim, n * dim, vd + pre * dim);
  }
  const kernels::AttentionDims dims{bsz, n, m, heads, dim};
  Tensor probs({bsz, heads, n, m});
  Tensor out({rows, dim});
  kernels::attention_forward(dims, q.value().ptr(), kcat.ptr(), vcat.ptr(), probs.ptr(), out.ptr());
  t.add_forward_macs(2 * bsz * n * m * dim);
  require_finite(probs, "attention");
  if (probs_out) *probs_out = probs;

  static const Var kNone;
  NodeSpec spec;
  spec.op = "attention";
  spec.inputs = {&q, &k, &v, prefix_k ? prefix_k : &kNone, prefix_v ? prefix_v : &kNone};
  spec.keep = {&q};
  spec.extras.push_back(std::move(kcat));
  spec.extras.push_back(std::move(vcat));
  spec.extras.push_back(std::move(probs));
  spec.backward = [dims, pre, n, m, bsz, dim](Tape& tp, const Node& nd, const Tensor& g) {
    const bool gq = nd.input_requires_grad(0);
    const bool gk = nd.input_requires_grad(1) || nd.input_requires_grad(3);
    const bool gv = nd.input_requires_grad(2) || nd.input_requires_grad(4);
    Tensor dq, dk, dv;
    if (gq) dq = Tensor({bsz * n, dim});
    if (gk) dk = Tensor({bsz * m, dim});
    if (gv) dv = Tensor({bsz * m, dim});
    kernels::attention_backward(dims, nd.ref(0).ptr(), nd.ref(1).ptr(), nd.ref(2).ptr(),
                                nd.ref(3).ptr(), g.ptr(), gq ? dq.ptr() : nullptr,
                                gk ? dk.ptr() : nullptr, gv ? dv.ptr() : nullptr);
    const std::uint64_t tile = bsz * n * m * dim;
    tp.add_backward_macs(((gq || gk) ? tile : 0) + (gq ? tile : 0) + (gk ? tile : 0) + (gv ? tile : 0));
    if (gq) tp.accumulate(nd.inputs[0], std::move(dq));
    auto split = [&](const Tensor& cat, int token_input, int prefix_input) {
      if (nd.input_requires_grad(static_cast<std::size_t>(token_input))) {
        Tensor d({bsz * n, dim});
        for (std::size_t b = 0; b < bsz; ++b)
          std::copy_n(cat.ptr() + (b * m + pre) * dim, n * dim, d.ptr() + b * n * dim);
        tp.accumulate(nd.inputs[static_cast<std::size_t>(token_input)], std::move(d));
      }
      if (pre && nd.input_requires_grad(static_cast<std::size_t>(prefix_input))) {
        Tensor d({bsz * pre, dim});
        for (std::size_t b = 0; b < bsz; ++b)
          std::copy_n(cat.ptr() + b * m * dim, pre * dim, d.ptr() + b * pre * dim);
        tp.accumulate(nd.inputs[static_cast<std::size_t>(prefix_input)], std::move(d));
      }
    };
    if (gk) split(dk, 1, 3);
    if (gv) split(dv, 2, 4);
  };
  return t.record(std::move(spec), std::move(out));
}

Var assemble_tokens(Tape& t, const Var& patches, const Var& cls, const Var& pos,
                    const std::vector<int>& orig_index, std::size_t batch) {
  require_rank2(patches, "assemble_tokens");
  require_rank2(pos, "assemble_tokens");
  const std::size_t dim = patches.shape()[1];
  if (batch == 0 || orig_index.size() % batch != 0) throw DimensionError("assemble_tokens: index list not divisible by batch");
  const std::size_t per = orig_index.size() / batch;
  if (per == 0 || patches.shape()[0] != batch * (per - 1)) {
    throw DimensionError("assemble_tokens: " + shape_str(patches.shape()) + " patches for " +
                         std::to_string(per) + " tokens per sample");
  }
  if (cls.value().numel() != dim || pos.shape()[1] != dim) throw DimensionError("assemble_tokens: feature dim");
  const std::size_t positions = pos.shape()[0];
  Tensor out({batch * per, dim});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per; ++i) {
      const int idx = orig_index[b * per + i];
      if ((i == 0) != (idx == 1)) throw ContractError("assemble_tokens: class token must come first, exactly once");
      if (idx < 1 || static_cast<std::size_t>(idx) > positions) {
        throw IndexError("assemble_tokens: position " + std::to_string(idx));
      }
      const double* src = i == 0 ? cls.value().ptr() : patches.value().ptr() + (b * (per - 1) + i - 1) * dim;
      const double* pe = pos.value().ptr() + static_cast<std::size_t>(idx - 1) * dim;
      double* dst = out.ptr() + (b * per + i) * dim;
      for (std::size_t j = 0; j < dim; ++j) dst[j] = src[j] + pe[j];
    }
  }
  NodeSpec spec;
  spec.op = "assemble_tokens";
  spec.inputs = {&patches, &cls, &pos};
  spec.backward = [orig_index, batch, per, dim, pshape = patches.shape(), cshape = cls.shape(),
                   posshape = pos.shape()](Tape& tp, const Node& nd, const Tensor& g) {
    Tensor dp, dc, dpos;
    if (nd.input_requires_grad(0)) dp = Tensor(pshape);
    if (nd.input_requires_grad(1)) dc = Tensor(cshape);
    if (nd.input_requires_grad(2)) dpos = Tensor(posshape);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < per; ++i) {
        const double* gr = g.ptr() + (b * per + i) * dim;
        const auto idx = static_cast<std::size_t>(orig_index[b * per + i]);
        if (i == 0 && nd.input_requires_grad(1))
          for (std::size_t j = 0; j < dim; ++j) dc[j] += gr[j];
        if (i > 0 && nd.input_requires_grad(0))
          for (std::size_t j = 0; j < dim; ++j) dp[(b * (per - 1) + i - 1) * dim + j] += gr[j];
        if (nd.input_requires_grad(2))
          for (std::size_t j = 0; j < dim; ++j) dpos[(idx - 1) * dim + j] += gr[j];
      }
    if (nd.input_requires_grad(0)) tp.accumulate(nd.inputs[0], std::move(dp));
    if (nd.input_requires_grad(1)) tp.accumulate(nd.inputs[1], std::move(dc));
    if (nd.input_requires_grad(2)) tp.accumulate(nd.inputs[2], std::move(dpos));
  };
  return t.record(std::move(spec), std::move(out));
}

Var cosine_weights(Tape& t, const Var& query, const Var& attn, const Var& keys) {
  require_rank2(query, "cosine_weights");
  require_rank2(attn, "cosine_weights");
  require_rank2(keys, "cosine_weights");
  const std::size_t b = query.shape()[0], d = query.shape()[1], m = keys.shape()[0];
  if (attn.shape() != keys.shape() || keys.shape()[1] != d) {
    throw DimensionError("cosine_weights: query " + shape_str(query.shape()) + ", attention " +
                         shape_str(attn.shape()) + ", keys " + shape_str(keys.shape()));
  }
  Tensor out({b, m});
  const double* zq = query.value().ptr();
  const double* av = attn.value().ptr();
  const double* kv = keys.value().ptr();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < m; ++c) {
      double num = 0.0, uu = 0.0, kk = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double u = zq[i * d + j] * av[c * d + j];
        num += u * kv[c * d + j];
        uu += u * u;
        kk += kv[c * d + j] * kv[c * d + j];
      }
      out[i * m + c] = (uu > 0.0 && kk > 0.0) ? num / std::sqrt(uu * kk) : 0.0;
    }
  t.add_forward_macs(3 * b * m * d);

  NodeSpec spec;
  spec.op = "cosine_weights";
  spec.inputs = {&query, &attn, &keys};
  spec.keep = {&query, &attn, &keys};
  spec.backward = [b, d, m](Tape& tp, const Node& nd, const Tensor& g) {
    const Tensor& zq = nd.ref(0);
    const Tensor& av = nd.ref(1);
    const Tensor& kv = nd.ref(2);
    Tensor dz, da, dk;
    if (nd.input_requires_grad(0)) dz = Tensor({b, d});
    if (nd.input_requires_grad(1)) da = Tensor({m, d});
    if (nd.input_requires_grad(2)) dk = Tensor({m, d});
    std::vector<double> u(d);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t c = 0; c < m; ++c) {
        double num = 0.0, uu = 0.0, kk = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          u[j] = zq[i * d + j] * av[c * d + j];
          num += u[j] * kv[c * d + j];
          uu += u[j] * u[j];
          kk += kv[c * d + j] * kv[c * d + j];
        }
        if (uu == 0.0 || kk == 0.0) continue;
        const double nu = std::sqrt(uu), nk = std::sqrt(kk);
        const double cosv = num / (nu * nk);
        const double go = g[i * m + c];
        for (std::size_t j = 0; j < d; ++j) {
          const double du = go * (kv[c * d + j] / (nu * nk) - cosv * u[j] / uu);
          if (dk.numel()) dk[c * d + j] += go * (u[j] / (nu * nk) - cosv * kv[c * d + j] / kk);
          if (da.numel()) da[c * d + j] += du * zq[i * d + j];
          if (dz.numel()) dz[i * d + j] += du * av[c * d + j];
        }
      }
    tp.add_backward_macs(3 * b * m * d);
    if (dz.numel()) tp.accumulate(nd.inputs[0], std::move(dz));
    if (da.numel()) tp.accumulate(nd.inputs[1], std::move(da));
    if (dk.numel()) tp.accumulate(nd.inputs[2], std::move(dk));
  };
  return t.record(std::move(spec), std::move(out));
}

}  // namespace cpsp::ad
