#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "gradfit/rng.hpp"
#include "gradfit/simd/simd_ops.hpp"

using namespace gradfit;

namespace {

bool bits_equal(double a, double b) {
  return std::memcmp(&a, &b, sizeof(double)) == 0;
}

std::vector<double> random_vec(std::size_t n, double lo, double hi,
                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("backend dispatch") {
  const auto original = simd::active_backend();
  simd::set_backend(simd::Backend::Scalar);
  CHECK(simd::active_backend() == simd::Backend::Scalar);
  if (simd::avx2_supported()) {
    simd::set_backend(simd::Backend::Avx2);
    CHECK(simd::active_backend() == simd::Backend::Avx2);
  }
  simd::set_backend(original);
  CHECK(simd::ops_for(simd::Backend::Scalar) != nullptr);
}

TEST_CASE("sincos accuracy against libm") {
  const auto* scalar = simd::ops_for(simd::Backend::Scalar);
  REQUIRE(scalar != nullptr);
  // spread of magnitudes, both inside and outside the reduction range
  std::vector<double> args;
  Rng rng(11);
  for (int k = 0; k < 20000; ++k) {
    const double mag = std::pow(10.0, rng.uniform(-3.0, 7.0));
    args.push_back((rng.uniform() < 0.5 ? -1.0 : 1.0) * mag);
  }
  // quadrant boundaries
  for (int k = -8; k <= 8; ++k) {
    args.push_back(k * 1.5707963267948966);
    args.push_back(k * 1.5707963267948966 + 1e-9);
  }
  std::vector<double> w(args.size(), 1.0), s(args.size()), c(args.size());
  scalar->sincos_affine(1.0, w.data(), args.data(), args.size(), s.data(),
                        c.data());
  // arguments fold through fma(1, 1*w + b) = w + b exactly here
  for (std::size_t i = 0; i < args.size(); ++i) {
    const double x = std::fma(1.0, w[i], args[i]);
    CHECK(std::fabs(s[i] - std::sin(x)) < 5e-15);
    CHECK(std::fabs(c[i] - std::cos(x)) < 5e-15);
  }
}

TEST_CASE("scalar and avx2 backends are bit-identical") {
  const auto* scalar = simd::ops_for(simd::Backend::Scalar);
  const auto* avx2 = simd::ops_for(simd::Backend::Avx2);
  if (avx2 == nullptr) {
    MESSAGE("avx2 unavailable; equivalence suite skipped");
    return;
  }
  for (const std::size_t n : {std::size_t{1}, std::size_t{3}, std::size_t{4},
                              std::size_t{7}, std::size_t{64},
                              std::size_t{1023}}) {
    const auto wv = random_vec(n, -300.0, 300.0, 1000 + n);
    const auto bv = random_vec(n, 0.0, 6.2832, 2000 + n);
    const double t = 0.421875;

    std::vector<double> s1(n), c1(n), s2(n), c2(n);
    scalar->sincos_affine(t, wv.data(), bv.data(), n, s1.data(), c1.data());
    avx2->sincos_affine(t, wv.data(), bv.data(), n, s2.data(), c2.data());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(bits_equal(s1[i], s2[i]));
      CHECK(bits_equal(c1[i], c2[i]));
    }

    std::vector<double> y1(n), y2(n);
    scalar->scale(c1.data(), -1.75, n, y1.data());
    avx2->scale(c1.data(), -1.75, n, y2.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(bits_equal(y1[i], y2[i]));

    scalar->scale_mul(s1.data(), wv.data(), 0.3125, n, y1.data());
    avx2->scale_mul(s1.data(), wv.data(), 0.3125, n, y2.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(bits_equal(y1[i], y2[i]));

    scalar->scale_mul_sq(c1.data(), wv.data(), -0.5, n, y1.data());
    avx2->scale_mul_sq(c1.data(), wv.data(), -0.5, n, y2.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(bits_equal(y1[i], y2[i]));

    const double d1 = scalar->dot(s1.data(), c1.data(), n);
    const double d2 = avx2->dot(s1.data(), c1.data(), n);
    CHECK(bits_equal(d1, d2));
  }

  // huge arguments route through the libm fallback on both paths
  {
    const std::size_t n = 9;
    auto wv = random_vec(n, 1e7, 1e9, 77);
    const auto bv = random_vec(n, 0.0, 6.2832, 78);
    std::vector<double> s1(n), c1(n), s2(n), c2(n);
    scalar->sincos_affine(2.0, wv.data(), bv.data(), n, s1.data(), c1.data());
    avx2->sincos_affine(2.0, wv.data(), bv.data(), n, s2.data(), c2.data());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(bits_equal(s1[i], s2[i]));
      CHECK(bits_equal(c1[i], c2[i]));
    }
  }

  // tensor expansion is a pure product grid
  {
    const std::size_t m = 13, s = 7;
    const auto src = random_vec(m, -2.0, 2.0, 5);
    const auto f = random_vec(s, -2.0, 2.0, 6);
    std::vector<double> d1v(m * s), d2v(m * s);
    scalar->outer_expand(src.data(), m, f.data(), s, d1v.data());
    avx2->outer_expand(src.data(), m, f.data(), s, d2v.data());
    for (std::size_t i = 0; i < m * s; ++i) {
      CHECK(bits_equal(d1v[i], d2v[i]));
      CHECK(d1v[i] == src[i / s] * f[i % s]);
    }
  }
}

TEST_CASE("dot matches a high-precision reference") {
  const auto& ops = simd::ops();
  const std::size_t n = 4097;
  const auto a = random_vec(n, -1.0, 1.0, 31);
  const auto b = random_vec(n, -1.0, 1.0, 32);
  long double acc = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    acc += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
  }
  const double got = ops.dot(a.data(), b.data(), n);
  CHECK(std::fabs(got - static_cast<double>(acc)) < 1e-11);
}
