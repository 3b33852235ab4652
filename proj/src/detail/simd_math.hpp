#pragma once

// glibc ships vector variants of exp (libmvec) but only announces them
// to the compiler under -ffast-math, which would also disable the NaN/Inf
// checks. Redeclaring the scalar functions with the simd attribute lets
// `omp simd` loops call the vector variants with normal IEEE semantics.

#include <cmath>

#if defined(CPSP_USE_LIBMVEC) && defined(__GNUC__) && defined(__x86_64__)
extern "C" {
double exp(double) noexcept __attribute__((simd("notinbranch")));
}
#endif

namespace cpsp::detail {

inline double vexp(double x) { return ::exp(x); }

}  // namespace cpsp::detail
