#include <cmath>
#include <cstddef>

#include "gradfit/simd/simd_ops.hpp"
#include "sincos_core.hpp"

namespace gradfit::simd {
namespace {

void sincos_affine_scalar(double t, const double* w, const double* b,
                          std::size_t n, double* s_out, double* c_out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::fma(t, w[i], b[i]);
    detail::sincos_one(x, &s_out[i], &c_out[i]);
  }
}

void scale_scalar(const double* x, double a, std::size_t n, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

void scale_mul_scalar(const double* x, const double* w, double a,
                      std::size_t n, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = (a * w[i]) * x[i];
}

void scale_mul_sq_scalar(const double* x, const double* w, double a,
                         std::size_t n, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = (a * (w[i] * w[i])) * x[i];
}

void outer_expand_scalar(const double* src, std::size_t m, const double* f,
                         std::size_t s, double* dst) {
  for (std::size_t i = 0; i < m; ++i) {
    const double v = src[i];
    double* row = dst + i * s;
    for (std::size_t j = 0; j < s; ++j) row[j] = v * f[j];
  }
}

// Four independent accumulators, combined as ((a0+a2)+(a1+a3)) + tail.
// The AVX2 variant reproduces this exact reduction tree lane-for-lane.
double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = std::fma(a[i], b[i], acc0);
    acc1 = std::fma(a[i + 1], b[i + 1], acc1);
    acc2 = std::fma(a[i + 2], b[i + 2], acc2);
    acc3 = std::fma(a[i + 3], b[i + 3], acc3);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail = std::fma(a[i], b[i], tail);
  return ((acc0 + acc2) + (acc1 + acc3)) + tail;
}

}  // namespace

extern const Ops kScalarOps = {
    sincos_affine_scalar, scale_scalar,        scale_mul_scalar,
    scale_mul_sq_scalar,  outer_expand_scalar, dot_scalar,
};

}  // namespace gradfit::simd
