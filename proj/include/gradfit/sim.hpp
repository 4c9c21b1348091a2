#pragma once

// Synthetic data generators and closed-form references: discounted-call
// stochastic simulation with pathwise (IPA) gradient estimators, a
// production-cost surface with cross-channel correlated errors, a
// short-range-correlated stationary error process, and Monte Carlo MSE
// evaluation. Every generator is a pure function of its configuration
// and seed.

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "gradfit/dataset.hpp"

namespace gradfit {

// ----- discounted European call -----
// S_T = S0 exp((r - sigma^2/2) T + sigma sqrt(T) omega), omega ~ N(0,1);
// payoff e^{-rT} (S_T - strike)_+.
double bs_payoff(double s0, double r, double sigma, double omega,
                 double maturity = 1.0, double strike = 100.0);

// Pathwise derivative estimates for the same draw omega; unbiased for
// (d/dS0, d/dr, d/dsigma) of the expected payoff.
struct IpaGradients {
  double d_s0;
  double d_r;
  double d_sigma;
};
IpaGradients ipa_gradients(double s0, double r, double sigma, double omega,
                           double maturity = 1.0, double strike = 100.0);

// Closed-form expected payoff in the maturity-1, strike-100 regime.
double bs_reference(double s0, double r, double sigma);

struct BsConfig {
  std::array<int, 3> grid = {7, 7, 7};  // points per axis (S0, r, sigma)
  int q = 1000;                         // replications per design point
  std::uint64_t seed = 0;
  DomainBox box = DomainBox{{80.0, 0.01, 0.2}, {120.0, 0.05, 1.0}};
};

// Equally spaced grid including the endpoints; at each design point the
// function response and all three gradient responses are averages over
// the same q draws, so errors correlate only within a design point.
MixedDataset gen_bs_dataset(const BsConfig& cfg);

// ----- production-cost surface -----
struct CobbDouglasParams {
  double efficiency = 1.0;                        // c0
  std::vector<double> elasticities = {0.8, 0.7, 0.6};

  double elasticity_sum() const;
  int d() const { return static_cast<int>(elasticities.size()) + 1; }
};

// value and analytic partials; inputs must be strictly positive.
double cobb_douglas_value(const CobbDouglasParams& params,
                          std::span<const double> t);
double cobb_douglas_grad(const CobbDouglasParams& params,
                         std::span<const double> t, int j);

// Reduced three-input surface (t1, t2, output) with the third factor
// price pinned to 1 by degree-one homogeneity; default parameters.
double cost_surface_value(std::span<const double> t);
double cost_surface_grad(std::span<const double> t, int j);

// n shared design points, i.i.d. uniform in [0.5, 1.5]^3; function plus
// two gradient channels with sd-0.35 Gaussian errors, cross-channel
// correlation rho at each point, independent across points.
MixedDataset gen_cost_dataset(int n, double rho, std::uint64_t seed);

// ----- generic short-range-correlated errors -----
struct ErrorSpec {
  std::vector<double> sigmas;  // per channel marginal sd
  double rho = 0.0;            // cross-channel correlation at lag 0
  double upsilon = 2.0;        // autocovariance decay exponent, > 1
  double bias_scale = 0.0;     // mean shift bias_scale * n^{-0.6}
  bool white_noise = false;    // skip the moving average (i.i.d. limit)
};

// n x channels matrix; each channel a stationary Gaussian sequence with
// lag-h autocovariance decaying like (1 + h)^{-upsilon} (moving-average
// construction truncated at lag 100), cross-channel correlation rho at
// lag 0.
Eigen::MatrixXd gen_correlated_errors(int n, const ErrorSpec& spec,
                                      std::uint64_t seed);

// ----- rate-study generator -----
// d = 1 multi-octave truth with a derivative channel and i.i.d. noise.
double wave_value(std::span<const double> t);
double wave_grad(std::span<const double> t, int j);
MixedDataset gen_wave_dataset(int n, double sigma, std::uint64_t seed,
                              int p = 1);

// ----- Monte Carlo MSE -----
struct MseResult {
  double mse;
  double se;
};

MseResult mse_eval(const std::function<double(std::span<const double>)>& predict,
                   const std::function<double(std::span<const double>)>& truth,
                   const DomainBox& box, int n_test, std::uint64_t seed);

}  // namespace gradfit
