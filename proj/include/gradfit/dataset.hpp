#pragma once

// Mixed observation container: function values plus up to p groups of
// first-partial observations, each group tied to one coordinate. CSV
// serialization uses one row per observation with a channel column
// (0 = function value, c >= 1 = derivative in coordinate c) and survives
// round trips exactly at 17 significant digits.

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

namespace gradfit {

struct DomainBox {
  std::vector<double> lo, hi;

  static DomainBox unit(int d) {
    DomainBox b;
    b.lo.assign(static_cast<std::size_t>(d), 0.0);
    b.hi.assign(static_cast<std::size_t>(d), 1.0);
    return b;
  }
  int d() const { return static_cast<int>(lo.size()); }
  double width(int j) const {
    return hi[static_cast<std::size_t>(j)] - lo[static_cast<std::size_t>(j)];
  }
  bool contains(std::span<const double> t, double slack = 1e-9) const;
  void validate() const;
};

struct ObsGroup {
  Eigen::MatrixXd t;  // n x d design points
  Eigen::VectorXd y;  // n responses

  Eigen::Index size() const { return y.size(); }
};

struct MixedDataset {
  int d = 0;
  ObsGroup func;                 // channel 0
  std::vector<ObsGroup> grads;   // channels 1..p, group j observes df/dt_j
  DomainBox box;                 // defaults to the unit box

  int p() const { return static_cast<int>(grads.size()); }
  Eigen::Index rows() const;
  void validate() const;
};

MixedDataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const MixedDataset& data, const std::string& path);

// %.17g, enough digits to reproduce the exact double on reload.
std::string format_full(double v);

}  // namespace gradfit
