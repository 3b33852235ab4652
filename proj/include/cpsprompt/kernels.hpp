#pragma once

// Dense compute kernels behind the autodiff primitives.
//
// `kernels::` holds the OpenMP-parallel versions used in training; each
// output row (or each (sample, head) attention tile) is owned by exactly one
// thread and accumulated in a fixed order, so results do not depend on the
// thread count. `kernels::reference::` holds plain serial loops kept as the
// oracle for tests and as the baseline in bench/.

#include <cstddef>

namespace cpsp::kernels {

// Below this many multiply-accumulates a kernel stays on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

// C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate)
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);
// C[m x k] = A[m x n] * B[k x n]^T (C += ... when accumulate)
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate = false);
// C[k x n] += A[m x k]^T * B[m x n]
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);

// Batched multi-head attention over row-major token matrices.
//   q:    [batch*queries x dim]
//   k, v: [batch*keys x dim]      (per sample: `keys` consecutive rows)
//   probs:[batch x heads x queries x keys]
//   out:  [batch*queries x dim]
struct AttentionDims {
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::size_t heads = 0;
  std::size_t dim = 0;
  std::size_t head_dim() const { return dim / heads; }
};

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* probs, double* out);
// Gradients are written (not accumulated); any of dq/dk/dv may be null.
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv);

namespace reference {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate = false);
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* probs, double* out);
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv);
}  // namespace reference

}  // namespace cpsp::kernels
