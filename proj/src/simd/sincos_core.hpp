#pragma once

// Shared scalar sin/cos element kernel. Both backends implement exactly
// this operation sequence (Cody-Waite two-term reduction by pi/2, then
// the classic fdlibm minimax polynomials on [-pi/4, pi/4]), so scalar and
// vector paths round identically and can be compared bit-for-bit. Inputs
// past the reduction range fall back to libm.

#include <cmath>
#include <cstdint>

namespace gradfit::simd::detail {

inline constexpr double kTwoOverPi = 6.36619772367581382433e-01;
// pi/2 split: high part carries 33 significant bits, so n * kPio2Hi is
// exact for |n| < 2^20.
inline constexpr double kPio2Hi = 1.57079632673412561417e+00;
inline constexpr double kPio2Lo = 6.07710050650619224932e-11;
// Reduction valid while the quotient stays below 2^20; stay well inside.
inline constexpr double kMaxReduction = 1.0e6;

inline constexpr double kS1 = -1.66666666666666324348e-01;
inline constexpr double kS2 = 8.33333333332248946124e-03;
inline constexpr double kS3 = -1.98412698298579493134e-04;
inline constexpr double kS4 = 2.75573137070700676789e-06;
inline constexpr double kS5 = -2.50507602534068634195e-08;
inline constexpr double kS6 = 1.58969099521155010221e-10;

inline constexpr double kC1 = 4.16666666666666019037e-02;
inline constexpr double kC2 = -1.38888888888741095749e-03;
inline constexpr double kC3 = 2.48015872894767294178e-05;
inline constexpr double kC4 = -2.75573143513906633035e-07;
inline constexpr double kC5 = 2.08757232129817482790e-09;
inline constexpr double kC6 = -1.13596475577881948265e-11;

// sin/cos on the reduced interval. y = reduced argument, z = y * y.
inline double sin_poly(double y, double z) {
  double p = std::fma(z, kS6, kS5);
  p = std::fma(z, p, kS4);
  p = std::fma(z, p, kS3);
  p = std::fma(z, p, kS2);
  p = std::fma(z, p, kS1);
  return std::fma(y * z, p, y);
}

inline double cos_poly(double z) {
  double q = std::fma(z, kC6, kC5);
  q = std::fma(z, q, kC4);
  q = std::fma(z, q, kC3);
  q = std::fma(z, q, kC2);
  q = std::fma(z, q, kC1);
  const double c0 = std::fma(-0.5, z, 1.0);
  return std::fma(z * z, q, c0);
}

inline void sincos_one(double x, double* s, double* c) {
  if (!(std::fabs(x) <= kMaxReduction)) {  // also catches NaN
    *s = std::sin(x);
    *c = std::cos(x);
    return;
  }
  const double fn = std::nearbyint(x * kTwoOverPi);
  const double r = std::fma(-fn, kPio2Hi, x);
  const double y = std::fma(-fn, kPio2Lo, r);
  const double z = y * y;
  const double sr = sin_poly(y, z);
  const double cr = cos_poly(z);
  // Quadrant fn mod 4, computed in doubles to mirror the vector path.
  const double q = fn - 4.0 * std::floor(fn * 0.25);
  if (q == 0.0) {
    *s = sr;
    *c = cr;
  } else if (q == 1.0) {
    *s = cr;
    *c = -sr;
  } else if (q == 2.0) {
    *s = -sr;
    *c = -cr;
  } else {
    *s = -cr;
    *c = sr;
  }
}

}  // namespace gradfit::simd::detail
