#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "cpsprompt/kernels.hpp"
#include "detail/simd_math.hpp"

namespace cpsp::kernels {

namespace {

using idx = long long;

// C block [rows x cols] (+)= A' B over `depth`, where A'(i, p) = a[i * ars + p * acs].
// A 4 x 16 (or 4 x 8) block of C stays in registers across the whole depth
// loop; each element still sums its products in ascending p, like the naive loop.
constexpr std::size_t kMR = 4;

typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v, bool accumulate) {
  if (accumulate) v += load8(p);
  std::memcpy(p, &v, sizeof v);
}

struct Operand {
  const double* a;
  std::size_t ars, acs;
  const double* b;
  std::size_t ldb;
  double* c;
  std::size_t ldc;
};

inline void micro16(const Operand& o, std::size_t i, std::size_t j, std::size_t depth, bool accumulate) {
  v8d r00{}, r01{}, r10{}, r11{}, r20{}, r21{}, r30{}, r31{};
  const double* a = o.a + i * o.ars;
  const std::size_t ars = o.ars;
  for (std::size_t p = 0; p < depth; ++p) {
    const double* brow = o.b + p * o.ldb + j;
    const v8d b0 = load8(brow), b1 = load8(brow + 8);
    const double* ap = a + p * o.acs;
    const double a0 = ap[0], a1 = ap[ars], a2 = ap[2 * ars], a3 = ap[3 * ars];
    r00 += a0 * b0; r01 += a0 * b1;
    r10 += a1 * b0; r11 += a1 * b1;
    r20 += a2 * b0; r21 += a2 * b1;
    r30 += a3 * b0; r31 += a3 * b1;
  }
  double* c = o.c + i * o.ldc + j;
  store8(c, r00, accumulate); store8(c + 8, r01, accumulate);
  c += o.ldc;
  store8(c, r10, accumulate); store8(c + 8, r11, accumulate);
  c += o.ldc;
  store8(c, r20, accumulate); store8(c + 8, r21, accumulate);
  c += o.ldc;
  store8(c, r30, accumulate); store8(c + 8, r31, accumulate);
}

inline void micro8(const Operand& o, std::size_t i, std::size_t j, std::size_t depth, bool accumulate) {
  v8d r0{}, r1{}, r2{}, r3{};
  const double* a = o.a + i * o.ars;
  const std::size_t ars = o.ars;
  for (std::size_t p = 0; p < depth; ++p) {
    const v8d b0 = load8(o.b + p * o.ldb + j);
    const double* ap = a + p * o.acs;
    r0 += ap[0] * b0;
    r1 += ap[ars] * b0;
    r2 += ap[2 * ars] * b0;
    r3 += ap[3 * ars] * b0;
  }
  double* c = o.c + i * o.ldc + j;
  store8(c, r0, accumulate);
  store8(c + o.ldc, r1, accumulate);
  store8(c + 2 * o.ldc, r2, accumulate);
  store8(c + 3 * o.ldc, r3, accumulate);
}

inline void edge_block(const Operand& o, std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1,
                       std::size_t depth, bool accumulate) {
  for (std::size_t i = i0; i < i1; ++i) {
    double* crow = o.c + i * o.ldc;
    if (!accumulate) std::fill(crow + j0, crow + j1, 0.0);
    for (std::size_t p = 0; p < depth; ++p) {
      const double av = o.a[i * o.ars + p * o.acs];
      const double* brow = o.b + p * o.ldb;
      for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
    }
  }
}

// Rows [r0, r1) of C (+)= A' B with `n` output columns.
void gemm_rows(const Operand& o, std::size_t r0, std::size_t r1, std::size_t depth, std::size_t n,
               bool accumulate) {
  std::size_t i = r0;
  for (; i + kMR <= r1; i += kMR) {
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) micro16(o, i, j, depth, accumulate);
    for (; j + 8 <= n; j += 8) micro8(o, i, j, depth, accumulate);
    if (j < n) edge_block(o, i, i + kMR, j, n, depth, accumulate);
  }
  if (i < r1) edge_block(o, i, r1, 0, n, depth, accumulate);
}

void gemm(const Operand& o, std::size_t m, std::size_t depth, std::size_t n, bool accumulate) {
  const idx blocks = static_cast<idx>((m + kMR - 1) / kMR);
  const bool parallel = m * depth * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (idx blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * kMR;
    gemm_rows(o, r0, std::min(m, r0 + kMR), depth, n, accumulate);
  }
}

struct TileScratch {
  std::vector<double> kt, vt, ds;
};

void gather_transposed(const double* src, std::size_t rows, std::size_t stride, std::size_t offset,
                       std::size_t dh, double* dst) {
  for (std::size_t j = 0; j < rows; ++j) {
    const double* r = src + j * stride + offset;
    for (std::size_t e = 0; e < dh; ++e) dst[e * rows + j] = r[e];
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (std::size_t j = 0; j < n; ++j) s += a[j] * b[j];
  return s;
}

// One (sample, head) tile of the forward pass. Head slices are read in place
// with row stride `dim`; only K is copied, transposed, for the score product.
void attention_tile_forward(const AttentionDims& d, std::size_t b, std::size_t h, const double* q,
                            const double* k, const double* v, double* probs, double* out,
                            TileScratch& sc) {
  const std::size_t dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t n = d.queries, m = d.keys, D = d.dim;
  sc.kt.resize(dh * m);
  gather_transposed(k + b * m * D, m, D, h * dh, dh, sc.kt.data());
  double* p = probs + (b * d.heads + h) * n * m;
  gemm_rows({q + b * n * D + h * dh, D, 1, sc.kt.data(), m, p, m}, 0, n, dh, m, false);
  for (std::size_t i = 0; i < n; ++i) {
    double* prow = p + i * m;
    double mx = prow[0] * scale;
    for (std::size_t j = 0; j < m; ++j) {
      prow[j] *= scale;
      mx = std::max(mx, prow[j]);
    }
#pragma omp simd
    for (std::size_t j = 0; j < m; ++j) prow[j] = detail::vexp(prow[j] - mx);
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) sum += prow[j];
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < m; ++j) prow[j] *= inv;
  }
  gemm_rows({p, m, 1, v + b * m * D + h * dh, D, out + b * n * D + h * dh, D}, 0, n, m, dh, false);
}

void attention_tile_backward(const AttentionDims& d, std::size_t b, std::size_t h, const double* q,
                             const double* k, const double* v, const double* probs,
                             const double* dout, double* dq, double* dk, double* dv,
                             TileScratch& sc) {
  const std::size_t dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t n = d.queries, m = d.keys, D = d.dim;
  const double* p = probs + (b * d.heads + h) * n * m;
  const double* go = dout + b * n * D + h * dh;
  if (dv) gemm_rows({p, 1, m, go, D, dv + b * m * D + h * dh, D}, 0, m, n, dh, false);
  if (!dq && !dk) return;
  // dP = dO V^T, then softmax backward into dS (scaled).
  sc.vt.resize(dh * m);
  sc.ds.resize(n * m);
  gather_transposed(v + b * m * D, m, D, h * dh, dh, sc.vt.data());
  double* ds = sc.ds.data();
  gemm_rows({go, D, 1, sc.vt.data(), m, ds, m}, 0, n, dh, m, false);
  for (std::size_t i = 0; i < n; ++i) {
    const double* prow = p + i * m;
    double* drow = ds + i * m;
    const double pd = dot(drow, prow, m);
    for (std::size_t j = 0; j < m; ++j) drow[j] = prow[j] * (drow[j] - pd) * scale;
  }
  if (dq) gemm_rows({ds, m, 1, k + b * m * D + h * dh, D, dq + b * n * D + h * dh, D}, 0, n, m, dh, false);
  if (dk) gemm_rows({ds, 1, m, q + b * n * D + h * dh, D, dk + b * m * D + h * dh, D}, 0, m, n, dh, false);
}

void zero_head_slices(const AttentionDims& d, std::size_t rows, double* buf) {
  if (buf) std::fill(buf, buf + rows * d.dim, 0.0);
}

}  // namespace

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  gemm({a, k, 1, b, n, c, n}, m, k, n, accumulate);
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  // Transpose B once so the inner loop runs over contiguous memory.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm({a, n, 1, bt.data(), k, c, k}, m, n, k, accumulate);
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  // C[k x n] += A^T B: row p of C reads column p of A.
  gemm({a, 1, k, b, n, c, n}, k, m, n, true);
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* probs, double* out) {
  const idx tiles = static_cast<idx>(d.batch * d.heads);
  const bool parallel = d.batch * d.queries * d.keys * d.dim >= kParallelThreshold;
#pragma omp parallel if (parallel)
  {
    TileScratch scratch;
#pragma omp for schedule(static)
    for (idx t = 0; t < tiles; ++t) {
      attention_tile_forward(d, t / d.heads, t % d.heads, q, k, v, probs, out, scratch);
    }
  }
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv) {
  zero_head_slices(d, d.batch * d.queries, dq);
  zero_head_slices(d, d.batch * d.keys, dk);
  zero_head_slices(d, d.batch * d.keys, dv);
  const idx tiles = static_cast<idx>(d.batch * d.heads);
  const bool parallel = d.batch * d.queries * d.keys * d.dim >= kParallelThreshold;
#pragma omp parallel if (parallel)
  {
    TileScratch scratch;
#pragma omp for schedule(static)
    for (idx t = 0; t < tiles; ++t) {
      attention_tile_backward(d, t / d.heads, t % d.heads, q, k, v, probs, dout, dq, dk, dv,
                              scratch);
    }
  }
}

}  // namespace cpsp::kernels
