#pragma once

// Truncated tensor-product random-feature dictionary. Per coordinate j a
// frozen draw of s frequencies/phases defines the cosine basis
//   phi_j(t)[v] = sqrt(2/s) * cos(t * omega_{j,v} + b_{j,v}),
// and the map stacks one block per coordinate subset S with
// 1 <= |S| <= r, each block the flattened outer product of its
// coordinates' bases. Blocks are ordered by subset size, lexicographic
// within a size; entries are row-major with the smallest coordinate index
// varying slowest. The same frequency draw backs values and all
// derivatives.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gradfit/kernels.hpp"

namespace gradfit {

struct FeatureBlock {
  std::vector<int> coords;  // sorted, 0-based
  std::size_t offset = 0;
  std::size_t len = 0;
};

struct FeatureMapConfig {
  int d = 0;
  int r = 1;
  int s = 1;
  std::vector<KernelSpec> kernels;  // one per coordinate
  int p_max = 0;                    // highest gradient type the map serves
  std::uint64_t seed = 0;
  // Largest admissible block family size C(d,r) * s^r.
  std::size_t block_cap = 2'000'000;
};

class FeatureMap {
 public:
  // Deterministic in the seed: identical configs give bit-identical maps.
  static FeatureMap build(const FeatureMapConfig& cfg);

  int d() const { return cfg_.d; }
  int r() const { return cfg_.r; }
  int s() const { return cfg_.s; }
  int p_max() const { return cfg_.p_max; }
  std::size_t dim() const { return dim_; }  // M
  const FeatureMapConfig& config() const { return cfg_; }
  const std::vector<FeatureBlock>& blocks() const { return blocks_; }

  std::span<const double> omegas(int j) const;
  std::span<const double> phases(int j) const;

  // Psi(t); out.size() == dim().
  void features(std::span<const double> t, std::span<double> out) const;
  // d Psi / dt_j; blocks without coordinate j are exactly zero.
  void features_grad(std::span<const double> t, int j,
                     std::span<double> out) const;
  // d^2 Psi / (dt_j dt_j2); symmetric in (j, j2).
  void features_hess(std::span<const double> t, int j, int j2,
                     std::span<double> out) const;

  // [Psi; d_1 Psi; ...; d_p Psi], out.size() == (p+1)*dim().
  void augmented(std::span<const double> t, int p,
                 std::span<double> out) const;
  // Row serving a gradient observation of coordinate g:
  // [d_g Psi; d^2_{g,1} Psi; ...; d^2_{g,p} Psi].
  void augmented_grad(std::span<const double> t, int g, int p,
                      std::span<double> out) const;

  // Single-coordinate basis phi_j (deriv = 0), phi_j' (1) or phi_j'' (2);
  // out.size() == s. Lets callers form feature inner products without
  // materializing the full block expansion.
  void coordinate_basis(double tj, int j, int deriv,
                        std::span<double> out) const;

 private:
  FeatureMap() = default;
  struct Tables;
  void eval_with_orders(std::span<const double> t,
                        std::span<const int> orders,
                        std::span<double> out) const;

  FeatureMapConfig cfg_;
  std::size_t dim_ = 0;
  std::vector<FeatureBlock> blocks_;
  std::vector<double> omegas_;  // d * s, coordinate-major
  std::vector<double> phases_;
  double scale_ = 0.0;  // sqrt(2/s)
};

struct AugmentedFeatures {
  std::vector<double> value;               // M entries
  std::vector<std::vector<double>> grads;  // p blocks of M entries
};

AugmentedFeatures augmented_features(const FeatureMap& map,
                                     std::span<const double> t, int p);

}  // namespace gradfit
