#pragma once

// Reverse-mode gradient tape with an exact census of retained activations.
//
// Retention policy (the memory model in accounting.hpp is written against
// exactly these rules). A primitive records a node only if at least one input
// requires a gradient, and then retains only what its backward reads:
//
//   matmul(a, b)          a if b requires grad; b if a requires grad
//   add, add_bias, scale,
//   sum, reshape,
//   gather_rows,
//   assemble_tokens       nothing
//   mul(a, b)             b if a requires grad; a if b requires grad
//   gelu(x)               x
//   layer_norm(x, g, b)   normalized x [m x D] and 1/std [m], if x or g requires grad;
//                         g if x requires grad
//   softmax_rows(x)       its output
//   cross_entropy         class probabilities [B x C]
//   attention             Q, concatenated K and V (prefix rows included), and
//                         the probability tensor [B x H x n x (P+n)]
//   cosine_weights        the query matrix, plus keys and attention vectors
//
// Buffers that belong to a Parameter are referenced, never counted: they are
// resident whether or not a tape exists. Counted buffers are de-duplicated by
// identity, so a buffer retained by several nodes counts once.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpsprompt/tensor.hpp"

namespace cpsp::ad {

enum class Group : std::uint8_t { prompt = 1, classifier = 2, backbone = 4 };
using GroupMask = std::uint8_t;

constexpr GroupMask bit(Group g) { return static_cast<GroupMask>(g); }
constexpr bool has(GroupMask m, Group g) { return (m & bit(g)) != 0; }

const char* group_name(Group g);

struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Group group, Tensor value);

  std::string name;
  Group group = Group::backbone;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
  std::size_t numel() const { return value.numel(); }
};

class Tape;

// Handle to a forward value. Constants and frozen parameters carry no
// gradient slot.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  bool requires_grad() const { return slot_ >= 0; }
  GroupMask groups() const { return groups_; }
  bool is_parameter() const { return is_param_; }
  explicit operator bool() const { return value_ != nullptr; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  int slot_ = -1;
  GroupMask groups_ = 0;
  bool is_param_ = false;
};

// Context handed to a node's backward function.
struct Node;
using BackwardFn = std::function<void(Tape&, const Node&, const Tensor& grad_out)>;

struct Node {
  const char* op = "";
  std::vector<int> inputs;  // slot per input, -1 for constants
  int output = -1;
  GroupMask groups = 0;
  std::vector<std::shared_ptr<const Tensor>> refs;
  std::vector<bool> counted;
  BackwardFn backward;

  const Tensor& ref(std::size_t i) const { return *refs.at(i); }
  bool input_requires_grad(std::size_t i) const { return inputs.at(i) >= 0; }
};

// Description of one primitive application, consumed by Tape::record.
struct NodeSpec {
  const char* op = "";
  std::vector<const Var*> inputs;
  // Input values retained for backward, in the order the backward reads them
  // through Node::ref. Null entries keep index positions stable.
  std::vector<const Var*> keep;
  // Fresh intermediate buffers retained after `keep`.
  std::vector<Tensor> extras;
  // Retain the output itself after the extras.
  bool keep_output = false;
  BackwardFn backward;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) const;
  Var constant(std::shared_ptr<const Tensor> t) const;
  // A trainable parameter gets a gradient slot; a frozen one is a constant
  // reference to the parameter's storage.
  Var watch(Parameter& p, bool trainable);

  Var record(NodeSpec spec, Tensor out);

  // Populates Parameter::grad (accumulating) on every reachable trainable
  // leaf, then clears the tape.
  void backward(const Var& loss);
  void clear();

  // Gradient plumbing for backward functions.
  void accumulate(int slot, Tensor grad);
  void add_forward_macs(std::uint64_t n) { forward_macs_ += n; }
  void add_backward_macs(std::uint64_t n) { backward_macs_ += n; }

  std::size_t live_elements() const { return live_; }
  std::size_t peak_live_elements() const { return peak_; }
  void reset_peak() { peak_ = live_; }
  // Independent walk over the retained buffers of all pending nodes.
  std::size_t census() const;
  // Retained buffers of nodes whose inputs depend on any group in `groups`.
  std::size_t census(GroupMask groups) const;
  std::size_t node_count() const { return nodes_.size(); }

  std::uint64_t forward_macs() const { return forward_macs_; }
  std::uint64_t backward_macs() const { return backward_macs_; }
  void reset_macs() { forward_macs_ = backward_macs_ = 0; }

  void enable_op_log(bool on) { log_ops_ = on; }
  const std::vector<std::string>& op_log() const { return op_log_; }

 private:
  struct Slot {
    Shape shape;
    Parameter* leaf = nullptr;
    std::optional<Tensor> grad;
  };

  void retain(const std::shared_ptr<const Tensor>& t);
  void release(const std::shared_ptr<const Tensor>& t);

  std::vector<Node> nodes_;
  std::vector<Slot> slots_;
  std::unordered_map<const Tensor*, std::size_t> retained_;
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
  std::uint64_t forward_macs_ = 0;
  std::uint64_t backward_macs_ = 0;
  bool log_ops_ = false;
  std::vector<std::string> op_log_;
};

// ---------------------------------------------------------------------------
// Primitives. Every output is checked for NaN/Inf (NumericError).

Var matmul(Tape& t, const Var& a, const Var& b);
Var add(Tape& t, const Var& a, const Var& b);
// x [m x n] + bias [n] broadcast over rows; the only broadcast supported.
Var add_bias(Tape& t, const Var& x, const Var& bias);
Var mul(Tape& t, const Var& a, const Var& b);
Var scale(Tape& t, const Var& x, double c);
Var sum(Tape& t, const Var& x);
Var gelu(Tape& t, const Var& x);
Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var softmax_rows(Tape& t, const Var& x);
Var reshape(Tape& t, const Var& x, Shape shape);
Var gather_rows(Tape& t, const Var& x, const std::vector<std::size_t>& rows);

// Mean over the batch of -log softmax(logits)[label]. When `allowed` is given,
// logits of disallowed classes are excluded from the softmax (class-incremental
// logit masking); a label must then be allowed.
Var cross_entropy(Tape& t, const Var& logits, const std::vector<int>& labels,
                  const std::vector<bool>* allowed = nullptr);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t prefix = 0;  // prompt rows prepended to keys/values, per sample
};
// q, k, v: [batch*n x D]; prefix_k, prefix_v: [batch*prefix x D] or null.
// If `probs_out` is non-null it receives the [batch x heads x n x (prefix+n)]
// attention probabilities.
Var attention(Tape& t, const Var& q, const Var& k, const Var& v, const AttentionShape& shape,
              const Var* prefix_k = nullptr, const Var* prefix_v = nullptr,
              Tensor* probs_out = nullptr);

// Builds a token matrix [batch*(p+1) x D] from patch embeddings
// [batch*p x D]. `orig_index` lists, per sample, the 1-based position of each
// token (class token = 1 first, then patches in 2..N+1); row j of `pos` is the
// positional embedding for position j+1.
Var assemble_tokens(Tape& t, const Var& patches, const Var& cls, const Var& pos,
                    const std::vector<int>& orig_index, std::size_t batch);

// alpha[b][m] = cos(query_b (.) attn_m, key_m); zero when either norm is 0.
Var cosine_weights(Tape& t, const Var& query, const Var& attn, const Var& keys);

}  // namespace cpsp::ad
