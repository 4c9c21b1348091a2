// AVX2/FMA variants. Compiled with -mavx2 -mfma; only ever invoked after
// runtime capability detection. Operation order mirrors the scalar
// reference exactly so results are bit-identical.

#include <cstddef>

#include "gradfit/simd/simd_ops.hpp"

#if defined(__x86_64__) || defined(__i386__)

#include <immintrin.h>

#include <cmath>

#include "sincos_core.hpp"

namespace gradfit::simd {
namespace {

using namespace detail;

inline __m256d neg(__m256d v) {
  return _mm256_xor_pd(v, _mm256_set1_pd(-0.0));
}

void sincos_affine_avx2(double t, const double* w, const double* b,
                        std::size_t n, double* s_out, double* c_out) {
  const __m256d vt = _mm256_set1_pd(t);
  const __m256d vtwo_over_pi = _mm256_set1_pd(kTwoOverPi);
  const __m256d vpio2_hi = _mm256_set1_pd(kPio2Hi);
  const __m256d vpio2_lo = _mm256_set1_pd(kPio2Lo);
  const __m256d vmax = _mm256_set1_pd(kMaxReduction);
  const __m256d vabs_mask = _mm256_castsi256_pd(
      _mm256_set1_epi64x(0x7FFFFFFFFFFFFFFFll));
  const __m256d vhalf_neg = _mm256_set1_pd(-0.5);
  const __m256d vone = _mm256_set1_pd(1.0);

  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vw = _mm256_loadu_pd(w + i);
    const __m256d vb = _mm256_loadu_pd(b + i);
    const __m256d x = _mm256_fmadd_pd(vt, vw, vb);

    const __m256d in_range =
        _mm256_cmp_pd(_mm256_and_pd(x, vabs_mask), vmax, _CMP_LE_OQ);

    const __m256d fn = _mm256_round_pd(
        _mm256_mul_pd(x, vtwo_over_pi),
        _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    const __m256d nfn = neg(fn);
    const __m256d r = _mm256_fmadd_pd(nfn, vpio2_hi, x);
    const __m256d y = _mm256_fmadd_pd(nfn, vpio2_lo, r);
    const __m256d z = _mm256_mul_pd(y, y);

    __m256d p = _mm256_fmadd_pd(z, _mm256_set1_pd(kS6), _mm256_set1_pd(kS5));
    p = _mm256_fmadd_pd(z, p, _mm256_set1_pd(kS4));
    p = _mm256_fmadd_pd(z, p, _mm256_set1_pd(kS3));
    p = _mm256_fmadd_pd(z, p, _mm256_set1_pd(kS2));
    p = _mm256_fmadd_pd(z, p, _mm256_set1_pd(kS1));
    const __m256d sr = _mm256_fmadd_pd(_mm256_mul_pd(y, z), p, y);

    __m256d q = _mm256_fmadd_pd(z, _mm256_set1_pd(kC6), _mm256_set1_pd(kC5));
    q = _mm256_fmadd_pd(z, q, _mm256_set1_pd(kC4));
    q = _mm256_fmadd_pd(z, q, _mm256_set1_pd(kC3));
    q = _mm256_fmadd_pd(z, q, _mm256_set1_pd(kC2));
    q = _mm256_fmadd_pd(z, q, _mm256_set1_pd(kC1));
    const __m256d c0 = _mm256_fmadd_pd(vhalf_neg, z, vone);
    const __m256d cr = _mm256_fmadd_pd(_mm256_mul_pd(z, z), q, c0);

    // quadrant = fn mod 4, in doubles (exact for the reduced range)
    const __m256d quad = _mm256_sub_pd(
        fn, _mm256_mul_pd(
                _mm256_set1_pd(4.0),
                _mm256_round_pd(_mm256_mul_pd(fn, _mm256_set1_pd(0.25)),
                                _MM_FROUND_TO_NEG_INF | _MM_FROUND_NO_EXC)));
    const __m256d m1 = _mm256_cmp_pd(quad, _mm256_set1_pd(1.0), _CMP_EQ_OQ);
    const __m256d m2 = _mm256_cmp_pd(quad, _mm256_set1_pd(2.0), _CMP_EQ_OQ);
    const __m256d m3 = _mm256_cmp_pd(quad, _mm256_set1_pd(3.0), _CMP_EQ_OQ);

    const __m256d nsr = neg(sr);
    const __m256d ncr = neg(cr);
    __m256d vs = _mm256_blendv_pd(sr, cr, m1);
    vs = _mm256_blendv_pd(vs, nsr, m2);
    vs = _mm256_blendv_pd(vs, ncr, m3);
    __m256d vc = _mm256_blendv_pd(cr, nsr, m1);
    vc = _mm256_blendv_pd(vc, ncr, m2);
    vc = _mm256_blendv_pd(vc, sr, m3);

    _mm256_storeu_pd(s_out + i, vs);
    _mm256_storeu_pd(c_out + i, vc);

    const int ok = _mm256_movemask_pd(in_range);
    if (ok != 0xF) {
      alignas(32) double xs[4];
      _mm256_store_pd(xs, x);
      for (int lane = 0; lane < 4; ++lane) {
        if (!(ok & (1 << lane))) {
          sincos_one(xs[lane], &s_out[i + lane], &c_out[i + lane]);
        }
      }
    }
  }
  for (; i < n; ++i) {
    const double x = std::fma(t, w[i], b[i]);
    sincos_one(x, &s_out[i], &c_out[i]);
  }
}

void scale_avx2(const double* x, double a, std::size_t n, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = a * x[i];
}

void scale_mul_avx2(const double* x, const double* w, double a, std::size_t n,
                    double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d aw = _mm256_mul_pd(va, _mm256_loadu_pd(w + i));
    _mm256_storeu_pd(y + i, _mm256_mul_pd(aw, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = (a * w[i]) * x[i];
}

void scale_mul_sq_avx2(const double* x, const double* w, double a,
                       std::size_t n, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vw = _mm256_loadu_pd(w + i);
    const __m256d aww = _mm256_mul_pd(va, _mm256_mul_pd(vw, vw));
    _mm256_storeu_pd(y + i, _mm256_mul_pd(aww, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = (a * (w[i] * w[i])) * x[i];
}

void outer_expand_avx2(const double* src, std::size_t m, const double* f,
                       std::size_t s, double* dst) {
  for (std::size_t i = 0; i < m; ++i) {
    const __m256d v = _mm256_set1_pd(src[i]);
    double* row = dst + i * s;
    std::size_t j = 0;
    for (; j + 4 <= s; j += 4) {
      _mm256_storeu_pd(row + j, _mm256_mul_pd(v, _mm256_loadu_pd(f + j)));
    }
    for (; j < s; ++j) row[j] = src[i] * f[j];
  }
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d vacc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vacc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i),
                           vacc);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, vacc);
  double tail = 0.0;
  for (; i < n; ++i) tail = std::fma(a[i], b[i], tail);
  return ((lanes[0] + lanes[2]) + (lanes[1] + lanes[3])) + tail;
}

const Ops kAvx2Ops = {
    sincos_affine_avx2, scale_avx2,        scale_mul_avx2,
    scale_mul_sq_avx2,  outer_expand_avx2, dot_avx2,
};

}  // namespace

const Ops* avx2_ops_or_null() { return &kAvx2Ops; }

}  // namespace gradfit::simd

#else  // non-x86 build: no AVX2 table

namespace gradfit::simd {
const Ops* avx2_ops_or_null() { return nullptr; }
}  // namespace gradfit::simd

#endif
