#pragma once

// Data-parallel kernels behind random-feature evaluation: sin/cos over
// affine arguments, derivative scalings, tensor-block expansion, and dot
// products. Each operation has a scalar reference implementation and an
// AVX2 variant; the two are bit-identical by construction (same FMA and
// reduction structure) and the active backend is selected at runtime.

#include <cstddef>
#include <string_view>

namespace gradfit::simd {

enum class Backend { Scalar, Avx2 };

struct Ops {
  // s_out[i] = sin(t * w[i] + b[i]), c_out[i] = cos(t * w[i] + b[i])
  void (*sincos_affine)(double t, const double* w, const double* b,
                        std::size_t n, double* s_out, double* c_out);
  // y[i] = a * x[i]
  void (*scale)(const double* x, double a, std::size_t n, double* y);
  // y[i] = (a * w[i]) * x[i]
  void (*scale_mul)(const double* x, const double* w, double a, std::size_t n,
                    double* y);
  // y[i] = (a * (w[i] * w[i])) * x[i]
  void (*scale_mul_sq)(const double* x, const double* w, double a,
                       std::size_t n, double* y);
  // dst[i * s + j] = src[i] * f[j]  (row-major tensor expansion)
  void (*outer_expand)(const double* src, std::size_t m, const double* f,
                       std::size_t s, double* dst);
  double (*dot)(const double* a, const double* b, std::size_t n);
};

// Table of the active backend. First call resolves the backend from the
// GRADFIT_SIMD environment variable ("scalar" or "avx2") or, absent that,
// from CPU capability detection.
const Ops& ops();

Backend active_backend();
bool avx2_supported();
std::string_view backend_name(Backend b);

// Force a backend (falls back to Scalar if unsupported). Test hook; not
// thread-safe against concurrent ops() users.
void set_backend(Backend b);

// Direct access to a specific backend's table, for equivalence tests.
// Returns nullptr when the backend is unavailable on this machine.
const Ops* ops_for(Backend b);

}  // namespace gradfit::simd
