#pragma once

// Weighted, centered ridge regression over augmented random features.
// Function rows carry the augmented feature vector; gradient rows carry
// its coordinate partial. Function responses are centered by their
// empirical mean (gradient responses pass through: subtracting a
// derivative channel's mean would remove the mean slope of the target
// with nothing in the model to absorb it). Each group's loss is
// normalized by its own size and the coefficient vector is shrunk by
// lambda * ||c||^2. Lambda is either fixed or selected by generalized
// cross-validation on a grid.
//
// Inputs are rescaled coordinate-wise to the unit box at fit time (the
// dataset's declared box), with the chain-rule factor applied to gradient
// responses and inverted on predicted gradients. Kernel lengthscales are
// therefore expressed in unit-box units.

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradfit/dataset.hpp"
#include "gradfit/feature_map.hpp"
#include "gradfit/kernels.hpp"

namespace gradfit {

std::vector<double> default_lambda_grid();  // 30 log-spaced in [1e-10, 1]

struct FitConfig {
  FeatureMapConfig features;  // features.d == 0 -> take d from the dataset
  int p = -1;                 // gradient groups to use; -1 -> all in the dataset
  std::vector<double> weights;      // w_1..w_p; empty -> all ones
  std::optional<double> lambda;     // engaged -> fixed; absent -> GCV
  std::vector<double> lambda_grid;  // empty -> default_lambda_grid()

  enum class Solve { Auto, Primal, Dual, FactorizedDual };
  Solve solve = Solve::Auto;

  // Exact GCV trace up to this Gram dimension; Hutchinson probes above.
  Eigen::Index exact_trace_cap = 4000;
  // Materialize the design matrix only while N*D stays under this count;
  // larger problems run through the factorized dual path.
  std::size_t design_entry_cap = 50'000'000;
};

struct GcvCurve {
  std::vector<double> lambdas;
  std::vector<double> values;
  double lambda_star = 0.0;
};

// Stacked design in scaled coordinates: function rows first, then
// gradient groups in order. y_centered holds centered function responses
// and raw (chain-rule scaled) gradient responses. row_weights holds 1
// for function rows and w_j for group-j rows (no group-size
// normalization; the solver applies that separately).
struct DesignMatrix {
  Eigen::MatrixXd Z;
  Eigen::VectorXd y_centered;
  Eigen::VectorXd row_weights;
  std::vector<Eigen::Index> group_sizes;  // n_0..n_p
};

DesignMatrix assemble_design(const MixedDataset& data, const FeatureMap& map,
                             int p, std::span<const double> weights = {});

class FittedModel {
 public:
  double predict(std::span<const double> t) const;
  // d predict / dt_j in the caller's (unscaled) units; no mean offset.
  double predict_grad(std::span<const double> t, int j) const;

  int p() const { return p_; }
  double lambda_used() const { return lambda_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& y_means() const { return y_means_; }
  const std::optional<GcvCurve>& gcv_curve() const { return curve_; }
  const FeatureMap& map() const { return *map_; }
  const DomainBox& box() const { return box_; }
  bool has_primal_coeffs() const { return coeffs_.size() > 0; }
  const Eigen::VectorXd& coeffs() const;  // throws if factorized-dual only

  // Text export: full-precision decimals, reload is bit-identical.
  void save(const std::string& path) const;
  static FittedModel load(const std::string& path);

  // Factorized dual representation: predictions contract stored training
  // rows against beta through per-coordinate basis dot products, so the
  // (p+1)*M coefficient vector is never materialized.
  struct DualRep {
    Eigen::MatrixXd points;        // stacked scaled training points
    std::vector<int> row_group;    // 0 = function row, g = gradient group
    Eigen::VectorXd beta;          // sqrt(w-tilde) * alpha-tilde
    std::vector<double> bases;     // [row][coord][deriv 0..2][s]
  };

 private:
  friend struct FittedModelAccess;
  FittedModel() = default;

  std::shared_ptr<const FeatureMap> map_;
  int p_ = 0;
  std::vector<double> weights_;
  double lambda_ = 0.0;
  std::vector<double> y_means_;  // subtracted offsets: function mean, then
                                 // zeros for the gradient groups
  DomainBox box_;
  std::optional<GcvCurve> curve_;
  Eigen::VectorXd coeffs_;
  std::optional<DualRep> dual_;
};

FittedModel fit(const MixedDataset& data, const FitConfig& config);
GcvCurve gcv_select(const MixedDataset& data, const FitConfig& config);

// Difference-based noise-variance ratios sigma0^2 / sigmaj^2, one per
// gradient group, estimated on scaled responses after ordering each
// group's points along a Hilbert curve. Variances below 1e-12 are
// clamped (with a warning) rather than divided by.
std::vector<double> default_weights(const MixedDataset& data);

// Exact kernel-representer solver; small-N oracle for the feature path.
struct ExactModel {
  AnovaKernelSpec spec;
  std::vector<Eigen::MatrixXd> points;  // scaled designs, group 0..p
  Eigen::VectorXd alpha;                // stacked by group
  std::vector<double> y_means;
  std::vector<double> weights;
  double lambda = 0.0;
  DomainBox box;
  int p = 0;
};

ExactModel exact_fit(const MixedDataset& data, const AnovaKernelSpec& spec,
                     std::span<const double> weights, double lambda,
                     Eigen::Index max_rows = 500);
double exact_predict(const ExactModel& model, std::span<const double> t);

}  // namespace gradfit
