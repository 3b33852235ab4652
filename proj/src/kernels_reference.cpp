#include <cmath>
#include <vector>

#include "cpsprompt/kernels.hpp"

namespace cpsp::kernels::reference {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[p * n + j];
      c[i * k + p] = accumulate ? c[i * k + p] + s : s;
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + p] * b[i * n + j];
      c[p * n + j] += s;
    }
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* probs, double* out) {
  const std::size_t dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.queries; ++i) {
        double* p = probs + ((b * d.heads + h) * d.queries + i) * d.keys;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < d.keys; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e)
            s += q[(b * d.queries + i) * d.dim + h * dh + e] * k[(b * d.keys + j) * d.dim + h * dh + e];
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < d.keys; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (std::size_t j = 0; j < d.keys; ++j) p[j] /= z;
        for (std::size_t e = 0; e < dh; ++e) {
          double s = 0.0;
          for (std::size_t j = 0; j < d.keys; ++j) s += p[j] * v[(b * d.keys + j) * d.dim + h * dh + e];
          out[(b * d.queries + i) * d.dim + h * dh + e] = s;
        }
      }
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv) {
  const std::size_t dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dq) std::fill(dq, dq + d.batch * d.queries * d.dim, 0.0);
  if (dk) std::fill(dk, dk + d.batch * d.keys * d.dim, 0.0);
  if (dv) std::fill(dv, dv + d.batch * d.keys * d.dim, 0.0);
  std::vector<double> dp(d.keys), ds(d.keys);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.queries; ++i) {
        const double* p = probs + ((b * d.heads + h) * d.queries + i) * d.keys;
        const double* go = dout + (b * d.queries + i) * d.dim + h * dh;
        for (std::size_t j = 0; j < d.keys; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += go[e] * v[(b * d.keys + j) * d.dim + h * dh + e];
          dp[j] = s;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < d.keys; ++j) dot += dp[j] * p[j];
        for (std::size_t j = 0; j < d.keys; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
        for (std::size_t j = 0; j < d.keys; ++j)
          for (std::size_t e = 0; e < dh; ++e) {
            if (dv) dv[(b * d.keys + j) * d.dim + h * dh + e] += p[j] * go[e];
            if (dq) dq[(b * d.queries + i) * d.dim + h * dh + e] += ds[j] * k[(b * d.keys + j) * d.dim + h * dh + e];
            if (dk) dk[(b * d.keys + j) * d.dim + h * dh + e] += ds[j] * q[(b * d.queries + i) * d.dim + h * dh + e];
          }
      }
}

}  // namespace cpsp::kernels::reference
