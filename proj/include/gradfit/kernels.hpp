#pragma once

// Shift-invariant univariate kernels with analytic derivatives, their
// normalized spectral densities, and i.i.d. frequency sampling. Also the
// truncated tensor-product ANOVA kernel built from per-coordinate
// families, with the first and mixed-second partials needed by the exact
// representer solver.
//
// All families are normalized to k(0) = 1, so each spectral measure is a
// probability density and frequency draws are plain i.i.d. samples.
// `tau` is a lengthscale in the units of the coordinate:
//
//   matern52:  (1 + |u|/tau + u^2/(3 tau^2)) exp(-|u|/tau)
//   laplacian: exp(-|u|/tau)
//   gaussian:  exp(-u^2 / (2 tau^2))
//   cauchy:    1 / (1 + u^2/tau^2)

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace gradfit {

enum class KernelFamily { Matern52, Laplacian, Gaussian, Cauchy };

KernelFamily kernel_family_from_string(std::string_view name);
std::string_view to_string(KernelFamily family);

struct KernelSpec {
  KernelFamily family = KernelFamily::Matern52;
  double tau = 1.0;

  void validate() const;  // throws ConfigError unless tau > 0
  // The Laplacian kernel has a kink at the origin and cannot serve
  // gradient functionals.
  bool differentiable() const { return family != KernelFamily::Laplacian; }
};

double kernel_eval(const KernelSpec& spec, double u);
// First and second derivatives of k. The Laplacian family throws
// NonDifferentiableError at u = 0.
double kernel_d1(const KernelSpec& spec, double u);
double kernel_d2(const KernelSpec& spec, double u);

// Probability density of the frequency distribution whose characteristic
// function is k; integrates to one.
double spectral_density(const KernelSpec& spec, double omega);

struct FrequencySample {
  std::vector<double> omegas;  // i.i.d. from spectral_density
  std::vector<double> phases;  // i.i.d. Uniform[0, 2*pi)
};

FrequencySample sample_frequencies(const KernelSpec& spec, int s,
                                   std::uint64_t seed);

// Truncated ANOVA tensor-product kernel
//   K(t, t') = sum over subsets S of {1..d}, 1 <= |S| <= r, of
//              prod_{j in S} k_j(t_j - t'_j).
struct AnovaKernelSpec {
  std::vector<KernelSpec> base;  // one per coordinate
  int r = 1;

  int d() const { return static_cast<int>(base.size()); }
  void validate() const;  // 1 <= r <= d, bases valid
};

double anova_kernel_eval(const AnovaKernelSpec& spec,
                         std::span<const double> t,
                         std::span<const double> t2);

// d/dt_j of anova_kernel_eval (derivative in the first argument).
double anova_kernel_grad(const AnovaKernelSpec& spec,
                         std::span<const double> t,
                         std::span<const double> t2, int j);

// d^2/(dt_j dt2_j2) of anova_kernel_eval. Symmetric under swapping
// (t, j) with (t2, j2).
double anova_kernel_cross(const AnovaKernelSpec& spec,
                          std::span<const double> t,
                          std::span<const double> t2, int j, int j2);

}  // namespace gradfit
