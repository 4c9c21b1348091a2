#include "gradfit/estimator.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Householder>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "gradfit/errors.hpp"
#include "gradfit/rng.hpp"
#include "gradfit/simd/simd_ops.hpp"

namespace gradfit {

std::vector<double> default_lambda_grid() {
  std::vector<double> grid(30);
  for (int i = 0; i < 30; ++i) {
    grid[static_cast<std::size_t>(i)] =
        std::pow(10.0, -10.0 + 10.0 * i / 29.0);
  }
  return grid;
}

namespace {

// ---------------------------------------------------------------------
// Scaling and centering

struct ScaledData {
  std::vector<Eigen::MatrixXd> t;    // group 0..p designs in the unit box
  std::vector<Eigen::VectorXd> yc;   // centered scaled responses
  std::vector<double> means;         // scaled-response means
  std::vector<double> wtilde;        // w_g * N / n_g, w_0 = 1
  std::vector<Eigen::Index> sizes;
  Eigen::Index N = 0;
};

ScaledData scale_and_center(const MixedDataset& data, int p,
                            std::span<const double> weights) {
  ScaledData out;
  const int d = data.d;
  out.t.resize(static_cast<std::size_t>(p) + 1);
  out.yc.resize(static_cast<std::size_t>(p) + 1);
  out.means.resize(static_cast<std::size_t>(p) + 1);
  out.wtilde.resize(static_cast<std::size_t>(p) + 1);
  out.sizes.resize(static_cast<std::size_t>(p) + 1);
  for (int g = 0; g <= p; ++g) {
    const ObsGroup& src =
        g == 0 ? data.func : data.grads[static_cast<std::size_t>(g - 1)];
    const auto gu = static_cast<std::size_t>(g);
    out.t[gu] = src.t;
    for (int j = 0; j < d; ++j) {
      out.t[gu].col(j) =
          (src.t.col(j).array() - data.box.lo[static_cast<std::size_t>(j)]) /
          data.box.width(j);
    }
    Eigen::VectorXd ys = src.y;
    if (g >= 1) ys *= data.box.width(g - 1);  // chain rule for d(t_g)
    // Only function responses are centered. Subtracting a gradient
    // group's mean would remove the mean-slope component of the target
    // with nothing in the model to absorb it (a constant offset is
    // invisible to derivative rows anyway).
    out.means[gu] = g == 0 ? ys.mean() : 0.0;
    out.yc[gu] = ys.array() - out.means[gu];
    out.sizes[gu] = src.size();
    out.N += src.size();
  }
  for (int g = 0; g <= p; ++g) {
    const double wg = g == 0 ? 1.0 : weights[static_cast<std::size_t>(g - 1)];
    out.wtilde[static_cast<std::size_t>(g)] =
        wg * static_cast<double>(out.N) /
        static_cast<double>(out.sizes[static_cast<std::size_t>(g)]);
  }
  return out;
}

// ---------------------------------------------------------------------
// Symmetric tridiagonal solve (Thomas); (T + mu I) x = rhs.

Eigen::VectorXd tridiag_solve(const Eigen::VectorXd& diag,
                              const Eigen::VectorXd& sub, double mu,
                              const Eigen::VectorXd& rhs) {
  const Eigen::Index n = diag.size();
  Eigen::VectorXd cp(n), x(n);
  const double tiny =
      1e-14 * (diag.cwiseAbs().maxCoeff() + std::fabs(mu) + 1.0);
  double den = diag(0) + mu;
  if (!(den > tiny)) throw RankError("singular regularized system");
  cp(0) = n > 1 ? sub(0) / den : 0.0;
  x(0) = rhs(0) / den;
  for (Eigen::Index i = 1; i < n; ++i) {
    den = (diag(i) + mu) - sub(i - 1) * cp(i - 1);
    if (!(den > tiny)) throw RankError("singular regularized system");
    cp(i) = i + 1 < n ? sub(i) / den : 0.0;
    x(i) = (rhs(i) - sub(i - 1) * x(i - 1)) / den;
  }
  for (Eigen::Index i = n - 2; i >= 0; --i) x(i) -= cp(i) * x(i + 1);
  return x;
}

Eigen::VectorXd tridiag_apply(const Eigen::VectorXd& diag,
                              const Eigen::VectorXd& sub,
                              const Eigen::VectorXd& v) {
  const Eigen::Index n = diag.size();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = diag(i) * v(i);
    if (i > 0) acc += sub(i - 1) * v(i - 1);
    if (i + 1 < n) acc += sub(i) * v(i + 1);
    y(i) = acc;
  }
  return y;
}

// Cholesky of G + mu I with the one-shot jitter policy.
Eigen::LLT<Eigen::MatrixXd> make_llt(const Eigen::MatrixXd& G, double mu,
                                     double lambda) {
  Eigen::MatrixXd A = G;
  A.diagonal().array() += mu;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) {
    if (lambda == 0.0) {
      throw RankError("singular system at lambda = 0; increase lambda");
    }
    const double jitter = 1e-10 * A.trace() / static_cast<double>(A.rows());
    std::cerr << "gradfit: warning: factorization failed, retrying with "
                 "jitter "
              << jitter << "\n";
    A.diagonal().array() += jitter;
    llt.compute(A);
    if (llt.info() != Eigen::Success) {
      throw NumericError("factorization failed even with jitter");
    }
  }
  return llt;
}

Eigen::VectorXd chol_solve(const Eigen::MatrixXd& G, double mu,
                           const Eigen::VectorXd& rhs, double lambda) {
  return make_llt(G, mu, lambda).solve(rhs);
}

// ---------------------------------------------------------------------
// Ridge engine over a min-side Gram matrix. Spectral mode (dimension
// within trace cap): one tridiagonalization serves the whole lambda grid
// with exact traces. Above the cap, each lambda costs one Cholesky and
// the trace comes from fixed-seed Rademacher probes.

class RidgeEngine {
 public:
  // dual_side: G = B B^T and rhs = y-tilde; else G = B^T B, rhs = B^T y,
  // with ynorm2 = ||y-tilde||^2 for the residual identity.
  RidgeEngine(Eigen::MatrixXd G, Eigen::VectorXd rhs, bool dual_side,
              Eigen::Index n_rows, double ynorm2, Eigen::Index trace_cap)
      : dual_(dual_side), n_rows_(n_rows), ynorm2_(ynorm2) {
    if (G.rows() <= trace_cap) {
      tri_.emplace(G);
      diag_ = tri_->diagonal();
      sub_ = tri_->subDiagonal();
      w_ = tri_->matrixQ().transpose() * rhs;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
      es.computeFromTridiagonal(diag_, sub_, Eigen::EigenvaluesOnly);
      evs_ = es.eigenvalues();
    } else {
      G_ = std::move(G);
      rhs_ = std::move(rhs);
    }
  }

  bool spectral() const { return tri_.has_value(); }

  // (ssr, trace of the influence matrix) at this lambda.
  std::pair<double, double> evaluate(double lambda) const {
    const double mu = static_cast<double>(n_rows_) * lambda;
    if (spectral()) {
      const Eigen::VectorXd u = tridiag_solve(diag_, sub_, mu, w_);
      double ssr;
      if (dual_) {
        ssr = mu * mu * u.squaredNorm();
      } else {
        ssr = ynorm2_ - 2.0 * w_.dot(u) + u.dot(tridiag_apply(diag_, sub_, u));
      }
      double tr = 0.0;
      for (Eigen::Index i = 0; i < evs_.size(); ++i) {
        tr += evs_(i) / (evs_(i) + mu);
      }
      return {std::max(ssr, 0.0), tr};
    }
    const auto llt = make_llt(G_, mu, lambda);
    const Eigen::VectorXd x = llt.solve(rhs_);
    double ssr;
    if (dual_) {
      ssr = mu * mu * x.squaredNorm();
    } else {
      ssr = ynorm2_ - 2.0 * rhs_.dot(x) + x.dot(G_ * x);
    }
    // Hutchinson: tr A = E_z[ z^T z - mu z^T (G + mu)^{-1} z ].
    const Eigen::Index m = G_.rows();
    Rng rng(0x48757463u);  // fixed probe seed
    double tr = 0.0;
    constexpr int kProbes = 32;
    for (int k = 0; k < kProbes; ++k) {
      Eigen::VectorXd z(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        z(i) = rng.uniform() < 0.5 ? -1.0 : 1.0;
      }
      const Eigen::VectorXd gz = llt.solve(z);
      tr += static_cast<double>(m) - mu * z.dot(gz);
    }
    return {std::max(ssr, 0.0), tr / kProbes};
  }

  double gcv(double lambda) const {
    const auto [ssr, tr] = evaluate(lambda);
    const double denom = static_cast<double>(n_rows_) - tr;
    return ssr * static_cast<double>(n_rows_) * static_cast<double>(n_rows_) /
           (denom * denom);
  }

  // Min-side solution: primal coefficients, or alpha-tilde on the dual
  // side (caller maps back through B^T).
  Eigen::VectorXd solve(double lambda) const {
    const double mu = static_cast<double>(n_rows_) * lambda;
    if (spectral()) {
      const Eigen::VectorXd u = tridiag_solve(diag_, sub_, mu, w_);
      return tri_->matrixQ() * u;
    }
    return chol_solve(G_, mu, rhs_, lambda);
  }

 private:
  bool dual_;
  Eigen::Index n_rows_;
  double ynorm2_;
  std::optional<Eigen::Tridiagonalization<Eigen::MatrixXd>> tri_;
  Eigen::VectorXd diag_, sub_, w_, evs_;
  Eigen::MatrixXd G_;
  Eigen::VectorXd rhs_;
};

// ---------------------------------------------------------------------
// Factorized feature inner products (kernel trick on the realized
// feature draw). For derivative orders a on the left point and b on the
// right point, per coordinate j let
//   kappa_j(a,b) = phi_j^{(a)}(x_j) . phi_j^{(b)}(y_j).
// The inner product of two derivative-feature vectors is then
//   prod_{j in U} kappa_j(a_j, b_j) * sum_{k <= r-|U|} e_k(kappa(0,0)
//   over coordinates outside U),
// with U the set of differentiated coordinates. Exact for any s; avoids
// materializing s^r-sized blocks.

void elem_sym_sums(std::span<const double> v, int cap, double* e) {
  for (int k = 0; k <= cap; ++k) e[k] = (k == 0) ? 1.0 : 0.0;
  int seen = 0;
  for (const double x : v) {
    ++seen;
    const int top = seen < cap ? seen : cap;
    for (int k = top; k >= 1; --k) e[k] += x * e[k - 1];
  }
}

// Derivative order per coordinate for chunk l of a row. Function rows
// (g = 0) have chunks [Psi, d_1 Psi, ..., d_p Psi]; gradient rows carry
// the extra d_g from the observation functional.
void chunk_orders(int g, int l, int d, int* orders) {
  std::fill(orders, orders + d, 0);
  if (g >= 1) ++orders[g - 1];
  if (l >= 1) ++orders[l - 1];
}

struct PairKappa {
  // kappa[j][a * 3 + b]
  const double* k;
  int d;
  double at(int j, int a, int b) const { return k[j * 9 + a * 3 + b]; }
};

double chunk_inner(const PairKappa& kp, int r, const int* ax, const int* ay) {
  double prod = 1.0;
  double plain[64];
  int m = 0;
  int u = 0;
  for (int j = 0; j < kp.d; ++j) {
    if (ax[j] + ay[j] > 0) {
      ++u;
      prod *= kp.at(j, ax[j], ay[j]);
    } else {
      plain[m++] = kp.at(j, 0, 0);
    }
  }
  const int cap = r - u;
  if (cap < 0) return 0.0;
  double e[64];
  elem_sym_sums(std::span<const double>(plain, static_cast<std::size_t>(m)),
                cap, e);
  double sum = 0.0;
  for (int k = 0; k <= cap; ++k) sum += e[k];
  // the value chunk pairing (u == 0) excludes the empty subset
  if (u == 0) sum -= 1.0;
  return prod * sum;
}

// Non-owning view over per-point coordinate bases, laid out as
// [point][coord][order][s].
struct BasisView {
  const double* data = nullptr;
  Eigen::Index n = 0;
  int d = 0, s = 0;

  const double* at(Eigen::Index i, int j, int order) const {
    return data +
           ((static_cast<std::size_t>(i) * static_cast<std::size_t>(d) +
             static_cast<std::size_t>(j)) *
                3 +
            static_cast<std::size_t>(order)) *
               static_cast<std::size_t>(s);
  }
};

std::vector<double> build_basis_data(const FeatureMap& map,
                                     const Eigen::MatrixXd& pts) {
  const auto n = pts.rows();
  const int d = map.d();
  const int s = map.s();
  std::vector<double> data(static_cast<std::size_t>(n) * d * 3 * s);
  const BasisView view{data.data(), n, d, s};
  const auto su = static_cast<std::size_t>(s);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      for (int o = 0; o < 3; ++o) {
        map.coordinate_basis(pts(i, j), j, o,
                             {const_cast<double*>(view.at(i, j, o)), su});
      }
    }
  }
  return data;
}

// Inner product of full augmented rows (types gx, gy) given bases.
double row_inner(const FeatureMap& map, int p, const BasisView& bx,
                 Eigen::Index ix, int gx, const BasisView& by,
                 Eigen::Index iy, int gy) {
  const int d = map.d();
  const auto& o = simd::ops();
  double kap[64 * 9];
  for (int j = 0; j < d; ++j) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        kap[j * 9 + a * 3 + b] = o.dot(bx.at(ix, j, a), by.at(iy, j, b),
                                       static_cast<std::size_t>(map.s()));
      }
    }
  }
  const PairKappa kp{kap, d};
  int ax[64], ay[64];
  double total = 0.0;
  for (int l = 0; l <= p; ++l) {
    chunk_orders(gx, l, d, ax);
    chunk_orders(gy, l, d, ay);
    total += chunk_inner(kp, map.r(), ax, ay);
  }
  return total;
}

// ---------------------------------------------------------------------
// Hilbert ordering for the difference-based variance estimator.

// Skilling's axes-to-transpose conversion.
void axes_to_transpose(std::uint32_t* X, int b, int n) {
  std::uint32_t M = 1u << (b - 1), P, Q, t;
  for (Q = M; Q > 1; Q >>= 1) {
    P = Q - 1;
    for (int i = 0; i < n; ++i) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
  for (int i = 1; i < n; ++i) X[i] ^= X[i - 1];
  t = 0;
  for (Q = M; Q > 1; Q >>= 1) {
    if (X[n - 1] & Q) t ^= Q - 1;
  }
  for (int i = 0; i < n; ++i) X[i] ^= t;
}

std::uint64_t hilbert_key(std::span<const double> unit_point) {
  const int d = static_cast<int>(unit_point.size());
  const int bits = std::min(31, 62 / d);
  std::uint32_t X[16];
  const double top = static_cast<double>((1u << bits) - 1);
  for (int j = 0; j < d; ++j) {
    const double c = std::clamp(unit_point[static_cast<std::size_t>(j)], 0.0, 1.0);
    X[j] = static_cast<std::uint32_t>(c * top + 0.5);
  }
  axes_to_transpose(X, bits, d);
  std::uint64_t key = 0;
  for (int bit = bits - 1; bit >= 0; --bit) {
    for (int j = 0; j < d; ++j) {
      key = (key << 1) | ((X[j] >> bit) & 1u);
    }
  }
  return key;
}

double difference_variance(const Eigen::MatrixXd& unit_pts,
                           const Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd row = unit_pts.row(i);
    keys[static_cast<std::size_t>(i)] = hilbert_key(
        std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return keys[static_cast<std::size_t>(a)] <
                            keys[static_cast<std::size_t>(b)];
                   });
  double acc = 0.0;
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const double diff = y(order[static_cast<std::size_t>(i + 1)]) -
                        y(order[static_cast<std::size_t>(i)]);
    acc += diff * diff;
  }
  return acc / (2.0 * static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------

int resolve_p(const MixedDataset& data, const FitConfig& cfg) {
  const int p = cfg.p < 0 ? data.p() : cfg.p;
  if (p < 0 || p > data.p()) {
    throw ConfigError("fit: p exceeds the dataset's gradient groups");
  }
  return p;
}

std::vector<double> resolve_weights(const FitConfig& cfg, int p) {
  std::vector<double> w = cfg.weights;
  if (w.empty()) w.assign(static_cast<std::size_t>(p), 1.0);
  if (static_cast<int>(w.size()) < p) {
    throw ConfigError("fit: weights shorter than p");
  }
  w.resize(static_cast<std::size_t>(p));
  for (const double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError("fit: weights must be nonnegative and finite");
    }
  }
  return w;
}

FeatureMapConfig resolve_features(const MixedDataset& data,
                                  const FitConfig& cfg, int p) {
  FeatureMapConfig fc = cfg.features;
  if (fc.d == 0) fc.d = data.d;
  if (fc.d != data.d) throw ConfigError("fit: feature d mismatches dataset");
  if (fc.kernels.size() == 1 && fc.d > 1) {
    fc.kernels.assign(static_cast<std::size_t>(fc.d), fc.kernels[0]);
  }
  fc.p_max = std::max(fc.p_max, p);
  return fc;
}

}  // namespace

// ---------------------------------------------------------------------

DesignMatrix assemble_design(const MixedDataset& data, const FeatureMap& map,
                             int p, std::span<const double> weights) {
  data.validate();
  if (p < 0 || p > data.p()) throw ConfigError("assemble_design: bad p");
  if (p > map.p_max()) {
    throw ConfigError("assemble_design: map does not serve p gradients");
  }
  if (map.d() != data.d) throw ConfigError("assemble_design: d mismatch");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(static_cast<std::size_t>(p), 1.0);
  if (static_cast<int>(w.size()) != p) {
    throw ConfigError("assemble_design: weights must have one entry per group");
  }

  const ScaledData sd = scale_and_center(data, p, w);
  const std::size_t D = map.dim() * static_cast<std::size_t>(p + 1);

  DesignMatrix out;
  out.Z.resize(sd.N, static_cast<Eigen::Index>(D));
  out.y_centered.resize(sd.N);
  out.row_weights.resize(sd.N);
  out.group_sizes = sd.sizes;

  std::vector<double> row(D);
  Eigen::Index idx = 0;
  for (int g = 0; g <= p; ++g) {
    const auto gu = static_cast<std::size_t>(g);
    for (Eigen::Index i = 0; i < sd.sizes[gu]; ++i, ++idx) {
      Eigen::VectorXd pt = sd.t[gu].row(i);
      const std::span<const double> ts(pt.data(),
                                       static_cast<std::size_t>(pt.size()));
      if (g == 0) {
        map.augmented(ts, p, row);
      } else {
        map.augmented_grad(ts, g - 1, p, row);
      }
      out.Z.row(idx) =
          Eigen::Map<const Eigen::VectorXd>(row.data(),
                                            static_cast<Eigen::Index>(D));
      out.y_centered(idx) = sd.yc[gu](i);
      out.row_weights(idx) = g == 0 ? 1.0 : w[gu - 1];
    }
  }
  return out;
}

// ---------------------------------------------------------------------
// Fit orchestration

namespace {

enum class Path { Primal, Dual, FactorizedDual };

struct Problem {
  std::shared_ptr<const FeatureMap> map;
  ScaledData sd;
  int p = 0;
  std::vector<double> weights;
  Path path = Path::Primal;
  Eigen::MatrixXd B;        // sqrt(w-tilde)-scaled rows (materialized paths)
  Eigen::VectorXd ytil;     // sqrt(w-tilde)-scaled centered responses
  Eigen::MatrixXd G;        // min-side Gram
  Eigen::VectorXd rhs;      // engine rhs (primal: B^T ytil; dual: ytil)
  bool dual_side = false;
  std::vector<double> bases;       // factorized path, [row][coord][order][s]
  Eigen::MatrixXd stacked_points;  // factorized path
  std::vector<int> row_group;      // factorized path
};

Problem prepare(const MixedDataset& data, const FitConfig& cfg) {
  data.validate();
  Problem pr;
  pr.p = resolve_p(data, cfg);
  pr.weights = resolve_weights(cfg, pr.p);
  const FeatureMapConfig fc = resolve_features(data, cfg, pr.p);
  pr.map = std::make_shared<const FeatureMap>(FeatureMap::build(fc));
  pr.sd = scale_and_center(data, pr.p, pr.weights);

  const std::size_t D =
      pr.map->dim() * static_cast<std::size_t>(pr.p + 1);
  const std::size_t entries = D * static_cast<std::size_t>(pr.sd.N);

  if (cfg.solve == FitConfig::Solve::FactorizedDual ||
      (cfg.solve == FitConfig::Solve::Auto && entries > cfg.design_entry_cap)) {
    pr.path = Path::FactorizedDual;
  } else if (cfg.solve == FitConfig::Solve::Primal) {
    pr.path = Path::Primal;
  } else if (cfg.solve == FitConfig::Solve::Dual) {
    pr.path = Path::Dual;
  } else {
    pr.path = static_cast<Eigen::Index>(D) <= pr.sd.N ? Path::Primal
                                                      : Path::Dual;
  }

  // sqrt weights by stacked row order
  Eigen::VectorXd sw(pr.sd.N);
  {
    Eigen::Index idx = 0;
    for (int g = 0; g <= pr.p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      sw.segment(idx, pr.sd.sizes[gu])
          .setConstant(std::sqrt(pr.sd.wtilde[gu]));
      idx += pr.sd.sizes[gu];
    }
  }
  pr.ytil.resize(pr.sd.N);
  {
    Eigen::Index idx = 0;
    for (int g = 0; g <= pr.p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      pr.ytil.segment(idx, pr.sd.sizes[gu]) =
          sw.segment(idx, pr.sd.sizes[gu]).cwiseProduct(pr.sd.yc[gu]);
      idx += pr.sd.sizes[gu];
    }
  }

  if (pr.path == Path::FactorizedDual) {
    // Gram of unscaled rows through factor dots, then symmetric scaling.
    pr.stacked_points.resize(pr.sd.N, data.d);
    pr.row_group.resize(static_cast<std::size_t>(pr.sd.N));
    Eigen::Index idx = 0;
    for (int g = 0; g <= pr.p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      pr.stacked_points.middleRows(idx, pr.sd.sizes[gu]) = pr.sd.t[gu];
      for (Eigen::Index i = 0; i < pr.sd.sizes[gu]; ++i) {
        pr.row_group[static_cast<std::size_t>(idx + i)] = g;
      }
      idx += pr.sd.sizes[gu];
    }
    pr.bases = build_basis_data(*pr.map, pr.stacked_points);
    const BasisView bv{pr.bases.data(), pr.sd.N, pr.map->d(), pr.map->s()};
    pr.G.resize(pr.sd.N, pr.sd.N);
    for (Eigen::Index i = 0; i < pr.sd.N; ++i) {
      for (Eigen::Index jj = i; jj < pr.sd.N; ++jj) {
        const double v = row_inner(*pr.map, pr.p, bv, i,
                                   pr.row_group[static_cast<std::size_t>(i)],
                                   bv, jj,
                                   pr.row_group[static_cast<std::size_t>(jj)]) *
                         sw(i) * sw(jj);
        pr.G(i, jj) = v;
        pr.G(jj, i) = v;
      }
    }
    pr.rhs = pr.ytil;
    pr.dual_side = true;
    return pr;
  }

  // materialized rows
  {
    const auto Di = static_cast<Eigen::Index>(D);
    pr.B.resize(pr.sd.N, Di);
    std::vector<double> row(D);
    Eigen::Index idx = 0;
    for (int g = 0; g <= pr.p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      for (Eigen::Index i = 0; i < pr.sd.sizes[gu]; ++i, ++idx) {
        Eigen::VectorXd pt = pr.sd.t[gu].row(i);
        const std::span<const double> ts(pt.data(),
                                         static_cast<std::size_t>(pt.size()));
        if (g == 0) {
          pr.map->augmented(ts, pr.p, row);
        } else {
          pr.map->augmented_grad(ts, g - 1, pr.p, row);
        }
        pr.B.row(idx) =
            sw(idx) * Eigen::Map<const Eigen::VectorXd>(row.data(), Di);
      }
    }
  }
  if (pr.path == Path::Primal) {
    const auto Di = static_cast<Eigen::Index>(D);
    pr.G = Eigen::MatrixXd::Zero(Di, Di);
    pr.G.selfadjointView<Eigen::Lower>().rankUpdate(pr.B.transpose());
    pr.G.triangularView<Eigen::StrictlyUpper>() =
        pr.G.transpose().triangularView<Eigen::StrictlyUpper>();
    pr.rhs = pr.B.transpose() * pr.ytil;
    pr.dual_side = false;
  } else {
    pr.G = Eigen::MatrixXd::Zero(pr.sd.N, pr.sd.N);
    pr.G.selfadjointView<Eigen::Lower>().rankUpdate(pr.B);
    pr.G.triangularView<Eigen::StrictlyUpper>() =
        pr.G.transpose().triangularView<Eigen::StrictlyUpper>();
    pr.rhs = pr.ytil;
    pr.dual_side = true;
  }
  return pr;
}

GcvCurve run_gcv(const RidgeEngine& engine, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("gcv: empty lambda grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) {
      throw ConfigError("gcv: lambda grid must be strictly ascending");
    }
  }
  GcvCurve curve;
  curve.lambdas = grid;
  curve.values.resize(grid.size());
  double best = std::numeric_limits<double>::infinity();
  double best_lambda = std::numeric_limits<double>::quiet_NaN();
  bool any_finite = false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double v;
    try {
      v = engine.gcv(grid[i]);
    } catch (const RankError&) {
      v = std::numeric_limits<double>::infinity();
    }
    curve.values[i] = v;
    if (std::isfinite(v)) {
      any_finite = true;
      if (v <= best) {  // ties resolve to the larger lambda
        best = v;
        best_lambda = grid[i];
      }
    }
  }
  if (!any_finite) {
    throw NumericError("gcv: criterion not finite anywhere on the grid");
  }
  curve.lambda_star = best_lambda;
  return curve;
}

}  // namespace

// Grants the fit pipeline access to FittedModel internals.
struct FittedModelAccess {
  static FittedModel finalize(const MixedDataset& data, Problem&& pr,
                              double lambda, std::optional<GcvCurve> curve,
                              const RidgeEngine* engine);
};

namespace {

FittedModel finalize(const MixedDataset& data, Problem&& pr, double lambda,
                     std::optional<GcvCurve> curve,
                     const RidgeEngine* engine) {
  return FittedModelAccess::finalize(data, std::move(pr), lambda,
                                     std::move(curve), engine);
}

}  // namespace

FittedModel FittedModelAccess::finalize(const MixedDataset& data,
                                        Problem&& pr, double lambda,
                                        std::optional<GcvCurve> curve,
                                        const RidgeEngine* engine) {
  FittedModel model;
  model.map_ = pr.map;
  model.p_ = pr.p;
  model.weights_ = pr.weights;
  model.lambda_ = lambda;
  model.y_means_ = pr.sd.means;
  model.box_ = data.box;
  model.curve_ = std::move(curve);

  Eigen::VectorXd x;
  if (engine != nullptr) {
    x = engine->solve(lambda);
  } else {
    const double ynorm2 = pr.ytil.squaredNorm();
    RidgeEngine e(std::move(pr.G), std::move(pr.rhs), pr.dual_side, pr.sd.N,
                  ynorm2, /*trace_cap=*/0);  // direct Cholesky branch
    x = e.solve(lambda);
  }

  if (pr.path == Path::FactorizedDual) {
    FittedModel::DualRep rep;
    rep.points = std::move(pr.stacked_points);
    rep.row_group = std::move(pr.row_group);
    rep.bases = std::move(pr.bases);
    // beta = sqrt(w-tilde) alpha-tilde, so predictions contract unscaled
    // training rows against beta directly.
    rep.beta.resize(pr.sd.N);
    Eigen::Index idx = 0;
    for (int g = 0; g <= pr.p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      rep.beta.segment(idx, pr.sd.sizes[gu]) =
          std::sqrt(pr.sd.wtilde[gu]) * x.segment(idx, pr.sd.sizes[gu]);
      idx += pr.sd.sizes[gu];
    }
    model.dual_ = std::move(rep);
    return model;
  }

  if (pr.dual_side) {
    model.coeffs_ = pr.B.transpose() * x;
  } else {
    model.coeffs_ = std::move(x);
  }
  return model;
}

FittedModel fit(const MixedDataset& data, const FitConfig& config) {
  Problem pr = prepare(data, config);
  const bool need_gcv = !config.lambda.has_value();
  if (!need_gcv && !(config.lambda.value() >= 0.0)) {
    throw ConfigError("fit: lambda must be nonnegative");
  }

  if (!need_gcv) {
    // Fixed lambda: single Cholesky, no spectral prep.
    return finalize(data, std::move(pr), config.lambda.value(), std::nullopt,
                    nullptr);
  }
  const std::vector<double> grid =
      config.lambda_grid.empty() ? default_lambda_grid() : config.lambda_grid;
  const double ynorm2 = pr.ytil.squaredNorm();
  RidgeEngine engine(std::move(pr.G), std::move(pr.rhs), pr.dual_side,
                     pr.sd.N, ynorm2, config.exact_trace_cap);
  GcvCurve curve = run_gcv(engine, grid);
  const double lambda = curve.lambda_star;
  return finalize(data, std::move(pr), lambda, std::move(curve), &engine);
}

GcvCurve gcv_select(const MixedDataset& data, const FitConfig& config) {
  Problem pr = prepare(data, config);
  const std::vector<double> grid =
      config.lambda_grid.empty() ? default_lambda_grid() : config.lambda_grid;
  const double ynorm2 = pr.ytil.squaredNorm();
  RidgeEngine engine(std::move(pr.G), std::move(pr.rhs), pr.dual_side,
                     pr.sd.N, ynorm2, config.exact_trace_cap);
  return run_gcv(engine, grid);
}

// ---------------------------------------------------------------------
// Prediction

namespace {

// Contraction of a dual model against a probe row of type g_probe
// (0 = value row, j + 1 = gradient row for coordinate j).
double dual_contract(const FittedModel::DualRep& rep, const FeatureMap& map,
                     int p, std::span<const double> ts, int g_probe) {
  const BasisView train{rep.bases.data(), rep.points.rows(), map.d(),
                        map.s()};
  Eigen::MatrixXd pt(1, map.d());
  for (int c = 0; c < map.d(); ++c) pt(0, c) = ts[static_cast<std::size_t>(c)];
  const std::vector<double> probe_data = build_basis_data(map, pt);
  const BasisView probe{probe_data.data(), 1, map.d(), map.s()};
  double acc = 0.0;
  for (Eigen::Index i = 0; i < rep.beta.size(); ++i) {
    acc += rep.beta(i) *
           row_inner(map, p, train, i,
                     rep.row_group[static_cast<std::size_t>(i)], probe, 0,
                     g_probe);
  }
  return acc;
}

}  // namespace

double FittedModel::predict(std::span<const double> t) const {
  if (static_cast<int>(t.size()) != map_->d()) {
    throw ConfigError("predict: point dimension mismatch");
  }
  thread_local std::vector<double> ts, row;
  ts.resize(t.size());
  for (int j = 0; j < map_->d(); ++j) {
    ts[static_cast<std::size_t>(j)] =
        (t[static_cast<std::size_t>(j)] - box_.lo[static_cast<std::size_t>(j)]) /
        box_.width(j);
  }
  if (dual_) {
    return y_means_[0] + dual_contract(*dual_, *map_, p_, ts, 0);
  }
  const std::size_t D = map_->dim() * static_cast<std::size_t>(p_ + 1);
  row.resize(D);
  map_->augmented(ts, p_, row);
  return y_means_[0] + simd::ops().dot(row.data(), coeffs_.data(), D);
}

double FittedModel::predict_grad(std::span<const double> t, int j) const {
  if (j < 0 || j >= map_->d()) throw ConfigError("predict_grad: bad coordinate");
  thread_local std::vector<double> ts, row;
  ts.resize(t.size());
  for (int c = 0; c < map_->d(); ++c) {
    ts[static_cast<std::size_t>(c)] =
        (t[static_cast<std::size_t>(c)] - box_.lo[static_cast<std::size_t>(c)]) /
        box_.width(c);
  }
  double inner;
  if (dual_) {
    inner = dual_contract(*dual_, *map_, p_, ts, j + 1);
  } else {
    const std::size_t D = map_->dim() * static_cast<std::size_t>(p_ + 1);
    row.resize(D);
    map_->augmented_grad(ts, j, p_, row);
    inner = simd::ops().dot(row.data(), coeffs_.data(), D);
  }
  return inner / box_.width(j);
}

const Eigen::VectorXd& FittedModel::coeffs() const {
  if (coeffs_.size() == 0) {
    throw NumericError(
        "model holds a factorized dual representation; no dense coefficients");
  }
  return coeffs_;
}

// ---------------------------------------------------------------------
// Export / reload

void FittedModel::save(const std::string& path) const {
  if (dual_) {
    throw NumericError(
        "factorized dual models cannot be exported; refit with a "
        "materializable feature dimension");
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  const auto& fc = map_->config();
  out << "gradfit-model v1\n";
  out << "d " << fc.d << "\n";
  out << "r " << fc.r << "\n";
  out << "s " << fc.s << "\n";
  out << "p " << p_ << "\n";
  out << "seed " << fc.seed << "\n";
  out << "families";
  for (const auto& k : fc.kernels) out << " " << to_string(k.family);
  out << "\n";
  out << "taus";
  for (const auto& k : fc.kernels) out << " " << format_full(k.tau);
  out << "\n";
  out << "box_lo";
  for (const double v : box_.lo) out << " " << format_full(v);
  out << "\n";
  out << "box_hi";
  for (const double v : box_.hi) out << " " << format_full(v);
  out << "\n";
  out << "weights";
  for (const double v : weights_) out << " " << format_full(v);
  out << "\n";
  out << "lambda " << format_full(lambda_) << "\n";
  out << "y_means";
  for (const double v : y_means_) out << " " << format_full(v);
  out << "\n";
  out << "coeffs " << coeffs_.size() << "\n";
  for (Eigen::Index i = 0; i < coeffs_.size(); ++i) {
    out << format_full(coeffs_(i)) << "\n";
  }
  if (!out) throw ConfigError("write failed: " + path);
}

FittedModel FittedModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "gradfit-model v1") {
    throw SchemaError(path + ": not a gradfit model file");
  }
  FeatureMapConfig fc;
  FittedModel model;
  std::vector<std::string> families;
  std::vector<double> taus;
  Eigen::Index ncoef = -1;
  auto parse_tail = [](std::istringstream& ss) {
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    return v;
  };
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "d") ss >> fc.d;
    else if (key == "r") ss >> fc.r;
    else if (key == "s") ss >> fc.s;
    else if (key == "p") ss >> model.p_;
    else if (key == "seed") ss >> fc.seed;
    else if (key == "families") {
      std::string f;
      while (ss >> f) families.push_back(f);
    } else if (key == "taus") taus = parse_tail(ss);
    else if (key == "box_lo") model.box_.lo = parse_tail(ss);
    else if (key == "box_hi") model.box_.hi = parse_tail(ss);
    else if (key == "weights") model.weights_ = parse_tail(ss);
    else if (key == "lambda") ss >> model.lambda_;
    else if (key == "y_means") model.y_means_ = parse_tail(ss);
    else if (key == "coeffs") {
      ss >> ncoef;
      break;
    } else {
      throw SchemaError(path + ": unknown model key '" + key + "'");
    }
  }
  if (ncoef < 0) throw SchemaError(path + ": missing coeffs section");
  if (families.size() != taus.size() ||
      static_cast<int>(families.size()) != fc.d) {
    throw SchemaError(path + ": families/taus inconsistent with d");
  }
  for (std::size_t j = 0; j < families.size(); ++j) {
    fc.kernels.push_back(
        KernelSpec{kernel_family_from_string(families[j]), taus[j]});
  }
  fc.p_max = model.p_;
  model.coeffs_.resize(ncoef);
  for (Eigen::Index i = 0; i < ncoef; ++i) {
    if (!(in >> model.coeffs_(i))) {
      throw SchemaError(path + ": truncated coefficient vector");
    }
  }
  model.map_ = std::make_shared<const FeatureMap>(FeatureMap::build(fc));
  const std::size_t D =
      model.map_->dim() * static_cast<std::size_t>(model.p_ + 1);
  if (static_cast<std::size_t>(ncoef) != D) {
    throw SchemaError(path + ": coefficient count mismatches feature config");
  }
  if (static_cast<int>(model.y_means_.size()) != model.p_ + 1 ||
      model.box_.d() != fc.d ||
      static_cast<int>(model.weights_.size()) != model.p_) {
    throw SchemaError(path + ": inconsistent metadata");
  }
  return model;
}

// ---------------------------------------------------------------------
// Default weights

std::vector<double> default_weights(const MixedDataset& data) {
  data.validate();
  const int p = data.p();
  for (int g = 0; g <= p; ++g) {
    const auto& grp =
        g == 0 ? data.func : data.grads[static_cast<std::size_t>(g - 1)];
    if (grp.size() < 10) {
      throw ConfigError("default_weights: each group needs >= 10 points");
    }
  }
  std::vector<double> ones(static_cast<std::size_t>(p), 1.0);
  const ScaledData sd = scale_and_center(data, p, ones);
  constexpr double kFloor = 1e-12;
  std::vector<double> var(static_cast<std::size_t>(p) + 1);
  bool clamped = false;
  for (int g = 0; g <= p; ++g) {
    const auto gu = static_cast<std::size_t>(g);
    double v = difference_variance(sd.t[gu], sd.yc[gu]);
    if (v < kFloor) {
      v = kFloor;
      clamped = true;
    }
    var[gu] = v;
  }
  if (clamped) {
    std::cerr << "gradfit: warning: near-zero difference variance; weights "
                 "clamped\n";
  }
  std::vector<double> w(static_cast<std::size_t>(p));
  for (int j = 1; j <= p; ++j) {
    w[static_cast<std::size_t>(j - 1)] = var[0] / var[static_cast<std::size_t>(j)];
  }
  return w;
}

// ---------------------------------------------------------------------
// Exact representer fit

ExactModel exact_fit(const MixedDataset& data, const AnovaKernelSpec& spec,
                     std::span<const double> weights, double lambda,
                     Eigen::Index max_rows) {
  data.validate();
  spec.validate();
  if (spec.d() != data.d) throw ConfigError("exact_fit: d mismatch");
  const int p = data.p();
  if (p >= 1) {
    for (const auto& k : spec.base) {
      if (!k.differentiable()) {
        throw NonDifferentiableError(
            "exact_fit with gradients needs differentiable kernels");
      }
    }
  }
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(static_cast<std::size_t>(p), 1.0);
  if (static_cast<int>(w.size()) != p) {
    throw ConfigError("exact_fit: weights must have one entry per group");
  }
  const ScaledData sd = scale_and_center(data, p, w);
  if (sd.N > max_rows) {
    throw CapacityError("exact_fit: dataset exceeds the oracle row cap");
  }

  const Eigen::Index N = sd.N;
  Eigen::MatrixXd G(N, N);
  std::vector<int> row_group(static_cast<std::size_t>(N));
  std::vector<Eigen::Index> row_idx(static_cast<std::size_t>(N));
  {
    Eigen::Index idx = 0;
    for (int g = 0; g <= p; ++g) {
      for (Eigen::Index i = 0; i < sd.sizes[static_cast<std::size_t>(g)];
           ++i, ++idx) {
        row_group[static_cast<std::size_t>(idx)] = g;
        row_idx[static_cast<std::size_t>(idx)] = i;
      }
    }
  }
  auto point = [&](Eigen::Index row) {
    const auto g = static_cast<std::size_t>(row_group[static_cast<std::size_t>(row)]);
    return Eigen::VectorXd(sd.t[g].row(row_idx[static_cast<std::size_t>(row)]));
  };
  for (Eigen::Index a = 0; a < N; ++a) {
    const Eigen::VectorXd ta = point(a);
    const std::span<const double> sa(ta.data(), static_cast<std::size_t>(ta.size()));
    const int ga = row_group[static_cast<std::size_t>(a)];
    for (Eigen::Index b = a; b < N; ++b) {
      const Eigen::VectorXd tb = point(b);
      const std::span<const double> sb(tb.data(),
                                       static_cast<std::size_t>(tb.size()));
      const int gb = row_group[static_cast<std::size_t>(b)];
      double v;
      if (ga == 0 && gb == 0) {
        v = anova_kernel_eval(spec, sa, sb);
      } else if (ga >= 1 && gb == 0) {
        v = anova_kernel_grad(spec, sa, sb, ga - 1);
      } else if (ga == 0 && gb >= 1) {
        v = anova_kernel_grad(spec, sb, sa, gb - 1);
      } else {
        v = anova_kernel_cross(spec, sa, sb, ga - 1, gb - 1);
      }
      G(a, b) = v;
      G(b, a) = v;
    }
  }

  // Solve (W G + mu I) alpha = W y via the symmetric similarity
  // (S G S + mu I) beta = S y, alpha = S beta, S = sqrt(W). Zero-weight
  // groups drop out with alpha identically zero.
  Eigen::VectorXd sqw(N), yc(N);
  {
    Eigen::Index idx = 0;
    for (int g = 0; g <= p; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      sqw.segment(idx, sd.sizes[gu]).setConstant(std::sqrt(sd.wtilde[gu]));
      yc.segment(idx, sd.sizes[gu]) = sd.yc[gu];
      idx += sd.sizes[gu];
    }
  }
  const double mu = static_cast<double>(N) * lambda;
  const Eigen::MatrixXd A = sqw.asDiagonal() * G * sqw.asDiagonal();
  const Eigen::VectorXd rhs = sqw.cwiseProduct(yc);
  const Eigen::VectorXd beta = chol_solve(A, mu, rhs, lambda);

  ExactModel model;
  model.spec = spec;
  model.points = sd.t;
  model.alpha = sqw.cwiseProduct(beta);
  model.y_means = sd.means;
  model.weights = w;
  model.lambda = lambda;
  model.box = data.box;
  model.p = p;
  return model;
}

double exact_predict(const ExactModel& model, std::span<const double> t) {
  const int d = model.spec.d();
  if (static_cast<int>(t.size()) != d) {
    throw ConfigError("exact_predict: point dimension mismatch");
  }
  std::vector<double> ts(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    ts[static_cast<std::size_t>(j)] =
        (t[static_cast<std::size_t>(j)] - model.box.lo[static_cast<std::size_t>(j)]) /
        model.box.width(j);
  }
  double acc = model.y_means[0];
  Eigen::Index idx = 0;
  for (int g = 0; g <= model.p; ++g) {
    const auto& pts = model.points[static_cast<std::size_t>(g)];
    for (Eigen::Index i = 0; i < pts.rows(); ++i, ++idx) {
      Eigen::VectorXd xi = pts.row(i);
      const std::span<const double> sx(xi.data(),
                                       static_cast<std::size_t>(xi.size()));
      const double a = model.alpha(idx);
      if (g == 0) {
        acc += a * anova_kernel_eval(model.spec, sx, ts);
      } else {
        acc += a * anova_kernel_grad(model.spec, sx, ts, g - 1);
      }
    }
  }
  return acc;
}

}  // namespace gradfit
