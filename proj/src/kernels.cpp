#include "gradfit/kernels.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "gradfit/errors.hpp"
#include "gradfit/rng.hpp"

namespace gradfit {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kSqrt2Pi = 2.5066282746310002;  // sqrt(2*pi)

}  // namespace

KernelFamily kernel_family_from_string(std::string_view name) {
  if (name == "matern52") return KernelFamily::Matern52;
  if (name == "laplacian") return KernelFamily::Laplacian;
  if (name == "gaussian") return KernelFamily::Gaussian;
  if (name == "cauchy") return KernelFamily::Cauchy;
  throw ConfigError("unknown kernel family: " + std::string(name));
}

std::string_view to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::Matern52: return "matern52";
    case KernelFamily::Laplacian: return "laplacian";
    case KernelFamily::Gaussian: return "gaussian";
    case KernelFamily::Cauchy: return "cauchy";
  }
  return "?";
}

void KernelSpec::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ConfigError("kernel tau must be positive and finite");
  }
}

double kernel_eval(const KernelSpec& spec, double u) {
  const double a = std::fabs(u) / spec.tau;
  switch (spec.family) {
    case KernelFamily::Matern52:
      return (1.0 + a + a * a / 3.0) * std::exp(-a);
    case KernelFamily::Laplacian:
      return std::exp(-a);
    case KernelFamily::Gaussian:
      return std::exp(-0.5 * a * a);
    case KernelFamily::Cauchy:
      return 1.0 / (1.0 + a * a);
  }
  return 0.0;
}

double kernel_d1(const KernelSpec& spec, double u) {
  const double tau = spec.tau;
  const double a = std::fabs(u) / tau;
  const double sgn = u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0);
  switch (spec.family) {
    case KernelFamily::Matern52:
      // dk/da = -(a/3)(1 + a) e^{-a}; smooth through the origin.
      return -(a / 3.0) * (1.0 + a) * std::exp(-a) * sgn / tau;
    case KernelFamily::Laplacian:
      if (u == 0.0) {
        throw NonDifferentiableError(
            "laplacian kernel is not differentiable at 0");
      }
      return -sgn / tau * std::exp(-a);
    case KernelFamily::Gaussian:
      return -(u / (tau * tau)) * std::exp(-0.5 * a * a);
    case KernelFamily::Cauchy: {
      const double g = 1.0 + a * a;
      return -2.0 * u / (tau * tau) / (g * g);
    }
  }
  return 0.0;
}

double kernel_d2(const KernelSpec& spec, double u) {
  const double tau = spec.tau;
  const double a = std::fabs(u) / tau;
  switch (spec.family) {
    case KernelFamily::Matern52:
      // d2k/da2 = -(1/3)(1 + a - a^2) e^{-a}; C^2 at the origin.
      return -(1.0 + a - a * a) / 3.0 * std::exp(-a) / (tau * tau);
    case KernelFamily::Laplacian:
      if (u == 0.0) {
        throw NonDifferentiableError(
            "laplacian kernel is not differentiable at 0");
      }
      return std::exp(-a) / (tau * tau);
    case KernelFamily::Gaussian:
      return (a * a - 1.0) / (tau * tau) * std::exp(-0.5 * a * a);
    case KernelFamily::Cauchy: {
      const double g = 1.0 + a * a;
      return (-2.0 / (g * g) + 8.0 * a * a / (g * g * g)) / (tau * tau);
    }
  }
  return 0.0;
}

double spectral_density(const KernelSpec& spec, double omega) {
  const double tau = spec.tau;
  const double v = tau * omega;
  switch (spec.family) {
    case KernelFamily::Matern52: {
      // scaled Student-t(5): 8 tau / (3 pi) * (1 + tau^2 w^2)^{-3}
      const double g = 1.0 + v * v;
      return 8.0 * tau / (3.0 * kPi) / (g * g * g);
    }
    case KernelFamily::Laplacian:
      // Cauchy(0, 1/tau)
      return tau / (kPi * (1.0 + v * v));
    case KernelFamily::Gaussian:
      // Normal(0, 1/tau^2)
      return tau / kSqrt2Pi * std::exp(-0.5 * v * v);
    case KernelFamily::Cauchy:
      // Laplace(0, 1/tau)
      return 0.5 * tau * std::exp(-std::fabs(v));
  }
  return 0.0;
}

FrequencySample sample_frequencies(const KernelSpec& spec, int s,
                                   std::uint64_t seed) {
  spec.validate();
  if (s < 1) throw ConfigError("sample_frequencies: s must be >= 1");
  Rng rng(seed);
  FrequencySample out;
  out.omegas.resize(static_cast<std::size_t>(s));
  out.phases.resize(static_cast<std::size_t>(s));
  const double tau = spec.tau;
  for (int i = 0; i < s; ++i) {
    double w = 0.0;
    switch (spec.family) {
      case KernelFamily::Matern52:
        w = rng.student_t5() / (std::sqrt(5.0) * tau);
        break;
      case KernelFamily::Laplacian:
        w = rng.cauchy(1.0 / tau);
        break;
      case KernelFamily::Gaussian:
        w = rng.normal() / tau;
        break;
      case KernelFamily::Cauchy:
        w = rng.laplace(1.0 / tau);
        break;
    }
    out.omegas[static_cast<std::size_t>(i)] = w;
  }
  for (int i = 0; i < s; ++i) {
    out.phases[static_cast<std::size_t>(i)] = 2.0 * kPi * rng.uniform();
  }
  return out;
}

void AnovaKernelSpec::validate() const {
  if (base.empty()) throw ConfigError("anova kernel: no coordinates");
  if (r < 1 || r > d()) {
    throw ConfigError("anova kernel: interaction order r must be in [1, d]");
  }
  for (const auto& k : base) k.validate();
}

namespace {

// Elementary symmetric sums e_0..e_r of the values in v; e[0] = 1.
void elem_sym(std::span<const double> v, int r, double* e) {
  for (int k = 0; k <= r; ++k) e[k] = (k == 0) ? 1.0 : 0.0;
  int seen = 0;
  for (const double x : v) {
    ++seen;
    const int top = seen < r ? seen : r;
    for (int k = top; k >= 1; --k) e[k] += x * e[k - 1];
  }
}

// e_0..e_cap of {v_j : j not in {skip1, skip2}}.
double excluded_sym_sum(std::span<const double> v, int r_cap, int skip1,
                        int skip2) {
  double reduced[64];
  int m = 0;
  for (int j = 0; j < static_cast<int>(v.size()); ++j) {
    if (j == skip1 || j == skip2) continue;
    reduced[m++] = v[j];
  }
  double e[64];
  elem_sym(std::span<const double>(reduced, static_cast<std::size_t>(m)),
           r_cap, e);
  double sum = 0.0;
  for (int k = 0; k <= r_cap; ++k) sum += e[k];
  return sum;
}

void check_dims(const AnovaKernelSpec& spec, std::span<const double> t,
                std::span<const double> t2) {
  if (static_cast<int>(t.size()) != spec.d() ||
      static_cast<int>(t2.size()) != spec.d()) {
    throw ConfigError("anova kernel: point dimension mismatch");
  }
  if (spec.d() > 63) throw CapacityError("anova kernel: d too large");
}

void require_differentiable(const AnovaKernelSpec& spec) {
  for (const auto& k : spec.base) {
    if (!k.differentiable()) {
      throw NonDifferentiableError(
          "anova kernel derivative requires differentiable base families");
    }
  }
}

}  // namespace

double anova_kernel_eval(const AnovaKernelSpec& spec,
                         std::span<const double> t,
                         std::span<const double> t2) {
  check_dims(spec, t, t2);
  double v[64];
  for (int j = 0; j < spec.d(); ++j) {
    v[j] = kernel_eval(spec.base[static_cast<std::size_t>(j)], t[j] - t2[j]);
  }
  double e[64];
  elem_sym(std::span<const double>(v, static_cast<std::size_t>(spec.d())),
           spec.r, e);
  double sum = 0.0;
  for (int k = 1; k <= spec.r; ++k) sum += e[k];
  return sum;
}

double anova_kernel_grad(const AnovaKernelSpec& spec,
                         std::span<const double> t,
                         std::span<const double> t2, int j) {
  check_dims(spec, t, t2);
  require_differentiable(spec);
  double v[64];
  for (int l = 0; l < spec.d(); ++l) {
    v[l] = kernel_eval(spec.base[static_cast<std::size_t>(l)], t[l] - t2[l]);
  }
  const double dj =
      kernel_d1(spec.base[static_cast<std::size_t>(j)], t[j] - t2[j]);
  const std::span<const double> vs(v, static_cast<std::size_t>(spec.d()));
  return dj * excluded_sym_sum(vs, spec.r - 1, j, -1);
}

double anova_kernel_cross(const AnovaKernelSpec& spec,
                          std::span<const double> t,
                          std::span<const double> t2, int j, int j2) {
  check_dims(spec, t, t2);
  require_differentiable(spec);
  double v[64];
  for (int l = 0; l < spec.d(); ++l) {
    v[l] = kernel_eval(spec.base[static_cast<std::size_t>(l)], t[l] - t2[l]);
  }
  const std::span<const double> vs(v, static_cast<std::size_t>(spec.d()));
  if (j == j2) {
    const double d2 =
        kernel_d2(spec.base[static_cast<std::size_t>(j)], t[j] - t2[j]);
    return -d2 * excluded_sym_sum(vs, spec.r - 1, j, -1);
  }
  if (spec.r < 2) return 0.0;  // no subset holds both coordinates
  const double d1a =
      kernel_d1(spec.base[static_cast<std::size_t>(j)], t[j] - t2[j]);
  const double d1b =
      kernel_d1(spec.base[static_cast<std::size_t>(j2)], t[j2] - t2[j2]);
  return -d1a * d1b * excluded_sym_sum(vs, spec.r - 2, j, j2);
}

}  // namespace gradfit
