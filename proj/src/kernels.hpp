#pragma once

#include <cstdint>

#include "midccnn/tensor.hpp"

// Shared scalar kernels. Summation order is fixed (4 lanes combined
// lane0+lane1+lane2+lane3 after the strided sweep) so results are
// bit-reproducible run to run.

namespace midccnn::detail {

// Gradient buffer for accumulation, or nullptr when the tensor opted out.
inline double* grad_dst(const TensorPtr& t) {
  if (!t->requires_grad) return nullptr;
  t->ensure_grad();
  return t->grad.data();
}

inline double dot(const double* a, const double* b, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

inline void axpy(double* y, double alpha, const double* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace midccnn::detail
