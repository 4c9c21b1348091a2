#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <vector>

#include "gradfit/errors.hpp"
#include "gradfit/estimator.hpp"
#include "gradfit/rng.hpp"
#include "oracles.hpp"

using namespace gradfit;

namespace {

// smooth d-dimensional truth with analytic partials
double truth_value(std::span<const double> t) {
  double ss = 0.0;
  for (const double x : t) ss += x * x;
  return std::exp(-ss);
}

double truth_grad(std::span<const double> t, int j) {
  return -2.0 * t[static_cast<std::size_t>(j)] * truth_value(t);
}

MixedDataset make_dataset(int d, int p, Eigen::Index n0, Eigen::Index ng,
                          double noise, std::uint64_t seed,
                          bool zero_responses = false) {
  MixedDataset data;
  data.d = d;
  data.box = DomainBox::unit(d);
  Rng rng(seed);
  auto fill = [&](ObsGroup& g, Eigen::Index n, int channel) {
    g.t.resize(n, d);
    g.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> t(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) {
        t[static_cast<std::size_t>(j)] = rng.uniform();
        g.t(i, j) = t[static_cast<std::size_t>(j)];
      }
      double y = channel == 0 ? truth_value(t) : truth_grad(t, channel - 1);
      y += noise * rng.normal();
      g.y(i) = zero_responses ? 0.0 : y;
    }
  };
  fill(data.func, n0, 0);
  data.grads.resize(static_cast<std::size_t>(p));
  for (int j = 1; j <= p; ++j) {
    fill(data.grads[static_cast<std::size_t>(j - 1)], ng, j);
  }
  return data;
}

FitConfig make_config(int r, int s, double tau, std::uint64_t seed,
                      std::optional<double> lambda = 1e-6) {
  FitConfig cfg;
  cfg.features.r = r;
  cfg.features.s = s;
  cfg.features.kernels = {KernelSpec{KernelFamily::Matern52, tau}};
  cfg.features.seed = seed;
  cfg.lambda = lambda;
  return cfg;
}

FeatureMap build_map_for(const MixedDataset& data, const FitConfig& cfg,
                         int p) {
  FeatureMapConfig fc = cfg.features;
  fc.d = data.d;
  if (fc.kernels.size() == 1 && fc.d > 1) {
    fc.kernels.assign(static_cast<std::size_t>(fc.d), fc.kernels[0]);
  }
  fc.p_max = p;
  return FeatureMap::build(fc);
}

// group-size-corrected weight of each stacked row: w_g * N / n_g
Eigen::VectorXd corrected_weights(const DesignMatrix& dm) {
  Eigen::Index N = 0;
  for (const auto n : dm.group_sizes) N += n;
  Eigen::VectorXd w(N);
  Eigen::Index idx = 0;
  for (std::size_t g = 0; g < dm.group_sizes.size(); ++g) {
    for (Eigen::Index i = 0; i < dm.group_sizes[g]; ++i, ++idx) {
      w(idx) = dm.row_weights(idx) * static_cast<double>(N) /
               static_cast<double>(dm.group_sizes[g]);
    }
  }
  return w;
}

// the fit objective: sum_g (w_g / n_g) ||r_g||^2 + lambda ||c||^2
double objective(const DesignMatrix& dm, const Eigen::VectorXd& c,
                 double lambda) {
  const Eigen::VectorXd wt = corrected_weights(dm);
  Eigen::Index N = 0;
  for (const auto n : dm.group_sizes) N += n;
  const Eigen::VectorXd resid = dm.y_centered - dm.Z * c;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < resid.size(); ++i) {
    loss += wt(i) / static_cast<double>(N) * resid(i) * resid(i);
  }
  return loss + lambda * c.squaredNorm();
}

}  // namespace

TEST_CASE("assemble_design shapes and content") {
  const MixedDataset data = make_dataset(2, 2, 9, 7, 0.01, 1);
  FitConfig cfg = make_config(2, 4, 0.5, 3);
  const FeatureMap map = build_map_for(data, cfg, 2);

  const DesignMatrix d0 = assemble_design(data, map, 0);
  CHECK(d0.Z.rows() == 9);
  CHECK(d0.Z.cols() == static_cast<Eigen::Index>(map.dim()));

  const std::vector<double> w{0.5, 2.0};
  const DesignMatrix d2 = assemble_design(data, map, 2, w);
  CHECK(d2.Z.rows() == 9 + 7 + 7);
  CHECK(d2.Z.cols() == 3 * static_cast<Eigen::Index>(map.dim()));
  CHECK(d2.row_weights(0) == 1.0);
  CHECK(d2.row_weights(9) == 0.5);
  CHECK(d2.row_weights(16) == 2.0);

  // function row, block 0 equals the plain feature vector
  std::vector<double> f(map.dim());
  Eigen::VectorXd pt = data.func.t.row(3);
  map.features({pt.data(), 2}, f);
  for (std::size_t i = 0; i < map.dim(); ++i) {
    CHECK(d2.Z(3, static_cast<Eigen::Index>(i)) == f[i]);
  }

  // function responses are centered; gradient responses are passed
  // through (removing their mean would delete the mean slope of the
  // target with nothing in the model to absorb it)
  CHECK(std::fabs(d2.y_centered.head(9).mean()) < 1e-12);
  CHECK(d2.y_centered.segment(9, 7) == data.grads[0].y);

  // gradient row equals the finite difference of the function-row map
  const Eigen::Index row = 9 + 2;  // third row of gradient group 1
  Eigen::VectorXd gp = data.grads[0].t.row(2);
  const double h = 1e-5;
  std::vector<double> ap(3 * map.dim()), am(3 * map.dim());
  std::vector<double> tp{gp(0) + h, gp(1)}, tm{gp(0) - h, gp(1)};
  map.augmented(tp, 2, ap);
  map.augmented(tm, 2, am);
  for (std::size_t i = 0; i < 3 * map.dim(); ++i) {
    const double fd = (ap[i] - am[i]) / (2.0 * h);
    CHECK(d2.Z(row, static_cast<Eigen::Index>(i)) ==
          doctest::Approx(fd).epsilon(1e-4).scale(1.0));
  }
}

TEST_CASE("zero responses give exactly zero coefficients") {
  const MixedDataset data = make_dataset(2, 1, 12, 12, 0.0, 5, true);
  FitConfig cfg = make_config(2, 4, 0.5, 7);
  cfg.p = 1;
  const FittedModel model = fit(data, cfg);
  for (Eigen::Index i = 0; i < model.coeffs().size(); ++i) {
    CHECK(model.coeffs()(i) == 0.0);
  }
  const std::vector<double> t{0.5, 0.5};
  CHECK(model.predict(t) == 0.0);
  CHECK(model.predict_grad(t, 0) == 0.0);
}

TEST_CASE("tiny instance matches an independent dense solve") {
  // n0 = 4, p = 1, n1 = 4, s = 2, d = 1, r = 1
  const MixedDataset data = make_dataset(1, 1, 4, 4, 0.05, 11);
  FitConfig cfg = make_config(1, 2, 0.4, 13);
  cfg.p = 1;
  cfg.weights = {1.7};
  const double lambda = 3e-4;
  cfg.lambda = lambda;
  const FittedModel model = fit(data, cfg);

  const FeatureMap map = build_map_for(data, cfg, 1);
  const DesignMatrix dm = assemble_design(data, map, 1, cfg.weights);
  // explicit normal equations, group-normalized loss, LU solve
  const Eigen::Index D = dm.Z.cols();
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(D);
  G += (1.0 / 4.0) * dm.Z.topRows(4).transpose() * dm.Z.topRows(4);
  rhs += (1.0 / 4.0) * dm.Z.topRows(4).transpose() * dm.y_centered.head(4);
  G += (1.7 / 4.0) * dm.Z.bottomRows(4).transpose() * dm.Z.bottomRows(4);
  rhs += (1.7 / 4.0) * dm.Z.bottomRows(4).transpose() * dm.y_centered.tail(4);
  G += lambda * Eigen::MatrixXd::Identity(D, D);
  const Eigen::VectorXd c_oracle = G.fullPivLu().solve(rhs);
  for (Eigen::Index i = 0; i < D; ++i) {
    CHECK(model.coeffs()(i) == doctest::Approx(c_oracle(i)).epsilon(1e-10));
  }
}

TEST_CASE("primal and dual paths agree") {
  // D < N instance and D > N instance
  for (const bool wide : {false, true}) {
    const Eigen::Index n0 = wide ? 10 : 60;
    const MixedDataset data = make_dataset(2, 1, n0, n0, 0.02, 21);
    FitConfig cfg = make_config(2, 4, 0.5, 23);  // M = 24, D = 48
    cfg.p = 1;
    cfg.lambda = 1e-5;
    cfg.solve = FitConfig::Solve::Primal;
    const FittedModel primal = fit(data, cfg);
    cfg.solve = FitConfig::Solve::Dual;
    const FittedModel dual = fit(data, cfg);
    const double scale = primal.coeffs().norm();
    CHECK((primal.coeffs() - dual.coeffs()).norm() / scale < 1e-8);
  }
}

TEST_CASE("factorized dual equals the materialized path") {
  const MixedDataset data = make_dataset(2, 2, 25, 25, 0.02, 31);
  FitConfig cfg = make_config(2, 16, 0.5, 33);
  cfg.p = 2;
  cfg.weights = {1.2, 0.8};
  cfg.lambda = 1e-5;
  cfg.solve = FitConfig::Solve::Dual;
  const FittedModel dense = fit(data, cfg);
  cfg.solve = FitConfig::Solve::FactorizedDual;
  const FittedModel fac = fit(data, cfg);
  CHECK_FALSE(fac.has_primal_coeffs());
  Rng rng(7);
  for (int k = 0; k < 40; ++k) {
    const std::vector<double> t{rng.uniform(), rng.uniform()};
    CHECK(fac.predict(t) ==
          doctest::Approx(dense.predict(t)).epsilon(1e-9));
    for (int j = 0; j < 2; ++j) {
      CHECK(fac.predict_grad(t, j) ==
            doctest::Approx(dense.predict_grad(t, j)).epsilon(1e-8));
    }
  }
  CHECK_THROWS_AS((void)fac.coeffs(), NumericError);
  CHECK_THROWS_AS(fac.save("/tmp/gradfit_dual.model"), NumericError);
}

TEST_CASE("normal-equation residual and objective optimality") {
  const MixedDataset data = make_dataset(2, 2, 30, 30, 0.05, 41);
  FitConfig cfg = make_config(2, 6, 0.5, 43);
  cfg.p = 2;
  cfg.weights = {1.0, 2.5};
  const double lambda = 1e-4;
  cfg.lambda = lambda;
  const FittedModel model = fit(data, cfg);

  const FeatureMap map = build_map_for(data, cfg, 2);
  const DesignMatrix dm = assemble_design(data, map, 2, cfg.weights);
  const Eigen::VectorXd wt = corrected_weights(dm);
  const Eigen::Index N = dm.Z.rows();

  const Eigen::MatrixXd ZtWZ =
      dm.Z.transpose() * wt.asDiagonal() * dm.Z +
      static_cast<double>(N) * lambda *
          Eigen::MatrixXd::Identity(dm.Z.cols(), dm.Z.cols());
  const Eigen::VectorXd ZtWy = dm.Z.transpose() * (wt.asDiagonal() * dm.y_centered);
  const double resid =
      (ZtWZ * model.coeffs() - ZtWy).lpNorm<Eigen::Infinity>();
  CHECK(resid < 1e-8 * ZtWy.lpNorm<Eigen::Infinity>());

  const double at_min = objective(dm, model.coeffs(), lambda);
  Rng rng(47);
  for (int k = 0; k < 100; ++k) {
    Eigen::VectorXd delta(model.coeffs().size());
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta(i) = rng.normal();
    delta *= 1e-3 / delta.norm();
    CHECK(objective(dm, model.coeffs() + delta, lambda) > at_min);
  }
}

TEST_CASE("data-fit term is nondecreasing in lambda") {
  const MixedDataset data = make_dataset(1, 1, 40, 40, 0.1, 51);
  FitConfig cfg = make_config(1, 16, 0.3, 53);
  cfg.p = 1;
  const FeatureMap map = build_map_for(data, cfg, 1);
  const DesignMatrix dm = assemble_design(data, map, 1);
  double prev = -1.0;
  for (const double lambda : default_lambda_grid()) {
    cfg.lambda = lambda;
    const FittedModel model = fit(data, cfg);
    const double fit_term = objective(dm, model.coeffs(), 0.0);
    CHECK(fit_term >= prev - 1e-12);
    prev = fit_term;
  }
}

TEST_CASE("prediction identities") {
  const MixedDataset data = make_dataset(2, 2, 25, 20, 0.05, 61);
  FitConfig cfg = make_config(2, 5, 0.6, 63);
  cfg.p = 2;
  const double lambda = 1e-5;
  cfg.lambda = lambda;
  const FittedModel model = fit(data, cfg);

  // hand dot product against the augmented features
  const FeatureMap map = build_map_for(data, cfg, 2);
  const std::vector<double> t{0.31, 0.77};
  std::vector<double> row(3 * map.dim());
  map.augmented(t, 2, row);
  double acc = model.y_means()[0];
  for (std::size_t i = 0; i < row.size(); ++i) {
    acc += row[i] * model.coeffs()(static_cast<Eigen::Index>(i));
  }
  CHECK(model.predict(t) == doctest::Approx(acc).epsilon(1e-12));

  // fitted values at training points equal the influence relation
  const DesignMatrix dm = assemble_design(data, map, 2);
  const Eigen::VectorXd wt = corrected_weights(dm);
  const Eigen::Index N = dm.Z.rows();
  const Eigen::MatrixXd B = wt.cwiseSqrt().asDiagonal() * dm.Z;
  const Eigen::VectorXd ytil = wt.cwiseSqrt().asDiagonal() * dm.y_centered;
  const Eigen::MatrixXd inner =
      B.transpose() * B + static_cast<double>(N) * lambda *
                              Eigen::MatrixXd::Identity(B.cols(), B.cols());
  const Eigen::VectorXd fitted_w = B * inner.llt().solve(B.transpose() * ytil);
  for (Eigen::Index i = 0; i < 5; ++i) {
    Eigen::VectorXd pt = data.func.t.row(i);
    const double fitted = fitted_w(i) / std::sqrt(wt(i));
    CHECK(model.predict({pt.data(), 2}) - model.y_means()[0] ==
          doctest::Approx(fitted).epsilon(1e-7));
  }
}

TEST_CASE("predicted gradients differentiate the predictor") {
  const MixedDataset data = make_dataset(3, 3, 30, 30, 0.05, 71);
  FitConfig cfg = make_config(2, 4, 0.5, 73);
  cfg.p = 3;
  cfg.lambda = 1e-5;
  const FittedModel model = fit(data, cfg);
  Rng rng(77);
  for (int k = 0; k < 100; ++k) {
    const std::vector<double> t{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95),
                                rng.uniform(0.05, 0.95)};
    const int j = static_cast<int>(rng.next_u64() % 3);
    auto tp = t, tm = t;
    const double h = 1e-6;
    tp[static_cast<std::size_t>(j)] += h;
    tm[static_cast<std::size_t>(j)] -= h;
    const double fd = (model.predict(tp) - model.predict(tm)) / (2.0 * h);
    const double an = model.predict_grad(t, j);
    CHECK(std::fabs(an - fd) / (std::fabs(fd) + 1e-4) < 1e-5);
  }

  // p = 0 model: gradient reduces to c0 . features_grad
  FitConfig cfg0 = make_config(2, 4, 0.5, 73);
  cfg0.p = 0;
  cfg0.lambda = 1e-5;
  const FittedModel m0 = fit(data, cfg0);
  const FeatureMap map = build_map_for(data, cfg0, 0);
  const std::vector<double> t{0.4, 0.5, 0.6};
  std::vector<double> g(map.dim());
  map.features_grad(t, 1, g);
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    acc += g[i] * m0.coeffs()(static_cast<Eigen::Index>(i));
  }
  CHECK(m0.predict_grad(t, 1) == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("gcv matches a dense oracle on a toy instance") {
  const MixedDataset data = make_dataset(1, 1, 8, 6, 0.2, 81);
  FitConfig cfg = make_config(1, 3, 0.4, 83);
  cfg.p = 1;
  cfg.weights = {1.4};
  cfg.lambda_grid = {1e-8, 1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0};
  cfg.lambda.reset();
  const GcvCurve curve = gcv_select(data, cfg);
  REQUIRE(curve.lambdas.size() == 7);

  const FeatureMap map = build_map_for(data, cfg, 1);
  const DesignMatrix dm = assemble_design(data, map, 1, cfg.weights);
  const Eigen::VectorXd wt = corrected_weights(dm);
  const Eigen::Index N = dm.Z.rows();
  const Eigen::MatrixXd B = wt.cwiseSqrt().asDiagonal() * dm.Z;
  const Eigen::VectorXd ytil = wt.cwiseSqrt().asDiagonal() * dm.y_centered;

  double prev_trace = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.lambdas.size(); ++i) {
    const double mu = static_cast<double>(N) * curve.lambdas[i];
    const Eigen::MatrixXd A =
        B * (B.transpose() * B +
             mu * Eigen::MatrixXd::Identity(B.cols(), B.cols()))
                .inverse() *
        B.transpose();
    const double ssr = (ytil - A * ytil).squaredNorm();
    const double tr = A.trace();
    const double gcv = ssr * N * N / ((N - tr) * (N - tr));
    CHECK(curve.values[i] == doctest::Approx(gcv).epsilon(1e-8));
    CHECK(tr < prev_trace + 1e-12);  // influence trace shrinks with lambda
    prev_trace = tr;
  }
  // heavy regularization limit: GCV approaches the weighted null SSR
  const Eigen::MatrixXd A1 =
      B * (B.transpose() * B +
           1e6 * static_cast<double>(N) *
               Eigen::MatrixXd::Identity(B.cols(), B.cols()))
              .inverse() *
      B.transpose();
  CHECK((ytil - A1 * ytil).squaredNorm() ==
        doctest::Approx(ytil.squaredNorm()).epsilon(1e-3));

  // the returned minimizer is the grid argmin
  double best = std::numeric_limits<double>::infinity();
  double best_lambda = 0.0;
  for (std::size_t i = 0; i < curve.lambdas.size(); ++i) {
    if (curve.values[i] <= best) {
      best = curve.values[i];
      best_lambda = curve.lambdas[i];
    }
  }
  CHECK(curve.lambda_star == best_lambda);
}

TEST_CASE("pure noise selects the largest grid lambda") {
  int top_count = 0;
  for (int rep = 0; rep < 100; ++rep) {
    MixedDataset data;
    data.d = 1;
    data.box = DomainBox::unit(1);
    Rng rng(1000 + static_cast<std::uint64_t>(rep));
    data.func.t.resize(60, 1);
    data.func.y.resize(60);
    for (Eigen::Index i = 0; i < 60; ++i) {
      data.func.t(i, 0) = rng.uniform();
      data.func.y(i) = rng.normal();
    }
    FitConfig cfg = make_config(1, 8, 0.4, 5);
    cfg.p = 0;
    cfg.lambda.reset();
    const GcvCurve curve = gcv_select(data, cfg);
    if (curve.lambda_star == curve.lambdas.back()) ++top_count;
  }
  CHECK(top_count >= 80);
}

TEST_CASE("hutchinson trace keeps the gcv selection close to exact") {
  const MixedDataset data = make_dataset(1, 1, 60, 60, 0.3, 91);
  FitConfig cfg = make_config(1, 12, 0.3, 93);
  cfg.p = 1;
  cfg.lambda.reset();
  const GcvCurve exact = gcv_select(data, cfg);
  cfg.exact_trace_cap = 4;  // force the probe path
  const GcvCurve hutch = gcv_select(data, cfg);
  REQUIRE(exact.lambdas.size() == hutch.lambdas.size());
  for (const double v : hutch.values) CHECK(std::isfinite(v));
  CHECK(std::fabs(std::log10(hutch.lambda_star) -
                  std::log10(exact.lambda_star)) <= 1.5);
}

TEST_CASE("gcv with fitted lambda round trip") {
  const MixedDataset data = make_dataset(2, 1, 60, 60, 0.1, 95);
  FitConfig cfg = make_config(2, 6, 0.5, 97);
  cfg.p = 1;
  cfg.lambda.reset();
  const FittedModel model = fit(data, cfg);
  REQUIRE(model.gcv_curve().has_value());
  CHECK(model.lambda_used() == model.gcv_curve()->lambda_star);
  const GcvCurve direct = gcv_select(data, cfg);
  CHECK(direct.lambda_star == model.lambda_used());
  for (std::size_t i = 0; i < direct.values.size(); ++i) {
    CHECK(direct.values[i] ==
          doctest::Approx(model.gcv_curve()->values[i]).epsilon(1e-12));
  }
}

TEST_CASE("default weights recover variance ratios") {
  // gentle truth so first differences are noise-dominated
  auto gen = [&](double sd0, double sd1, std::uint64_t seed) {
    MixedDataset data;
    data.d = 2;
    data.box = DomainBox::unit(2);
    Rng rng(seed);
    const Eigen::Index n = 500;
    data.func.t.resize(n, 2);
    data.func.y.resize(n);
    data.grads.resize(1);
    data.grads[0].t.resize(n, 2);
    data.grads[0].y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double a = rng.uniform(), b = rng.uniform();
      data.func.t(i, 0) = a;
      data.func.t(i, 1) = b;
      data.grads[0].t(i, 0) = a;
      data.grads[0].t(i, 1) = b;
      data.func.y(i) = 0.1 * std::sin(2.0 * std::numbers::pi * a) +
                       sd0 * rng.normal();
      data.grads[0].y(i) = 0.1 * std::cos(2.0 * std::numbers::pi * a) +
                           sd1 * rng.normal();
    }
    return data;
  };
  const auto w_equal = default_weights(gen(0.5, 0.5, 101));
  REQUIRE(w_equal.size() == 1);
  CHECK(w_equal[0] > 0.75);
  CHECK(w_equal[0] < 1.25);

  const auto w_double = default_weights(gen(0.5, 1.0, 103));
  CHECK(w_double[0] > 0.25 * 0.7);
  CHECK(w_double[0] < 0.25 * 1.3);

  // constant responses: clamped on both sides, weight 1
  MixedDataset flat = gen(0.0, 0.0, 105);
  flat.func.y.setConstant(2.0);
  flat.grads[0].y.setConstant(-1.0);
  const auto w_flat = default_weights(flat);
  CHECK(w_flat[0] == 1.0);

  MixedDataset small = gen(0.5, 0.5, 107);
  small.func.t = small.func.t.topRows(5).eval();
  small.func.y = small.func.y.head(5).eval();
  CHECK_THROWS_AS((void)default_weights(small), ConfigError);
}

TEST_CASE("exact representer fit interpolates noiseless kernel data") {
  const KernelSpec base{KernelFamily::Matern52, 0.3};
  MixedDataset data;
  data.d = 1;
  data.box = DomainBox::unit(1);
  const Eigen::Index n = 20;
  data.func.t.resize(n, 1);
  data.func.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n - 1);
    data.func.t(i, 0) = t;
    data.func.y(i) = kernel_eval(base, t - 0.5);
  }
  const AnovaKernelSpec spec{{base}, 1};
  const ExactModel model = exact_fit(data, spec, {}, 1e-10);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = data.func.t(i, 0);
    CHECK(std::fabs(exact_predict(model, {&t, 1}) - data.func.y(i)) < 1e-6);
  }

  // zero data -> zero expansion
  MixedDataset zeros = data;
  zeros.func.y.setZero();
  const ExactModel zmodel = exact_fit(zeros, spec, {}, 1e-6);
  CHECK(zmodel.alpha.norm() == 0.0);

  // row cap
  CHECK_THROWS_AS((void)exact_fit(data, spec, {}, 1e-6, 10), CapacityError);
}

TEST_CASE("feature fit approaches the exact representer fit") {
  // univariate check; the acceptance suite runs the full 2-d version
  const KernelSpec base{KernelFamily::Matern52, 0.35};
  MixedDataset data;
  data.d = 1;
  data.box = DomainBox::unit(1);
  const Eigen::Index n = 25;
  data.func.t.resize(n, 1);
  data.func.y.resize(n);
  data.grads.resize(1);
  data.grads[0].t.resize(n, 1);
  data.grads[0].y.resize(n);
  Rng rng(111);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = rng.uniform();
    data.func.t(i, 0) = t;
    data.func.y(i) = kernel_eval(base, t - 0.5);
    data.grads[0].t(i, 0) = t;
    data.grads[0].y(i) = kernel_d1(base, t - 0.5);
  }
  const double lambda = 1e-5;
  const std::vector<double> ew{1.0};
  const ExactModel exact =
      exact_fit(data, AnovaKernelSpec{{base}, 1}, ew, lambda);

  auto rms_gap = [&](int s) {
    FitConfig cfg;
    cfg.features.r = 1;
    cfg.features.s = s;
    cfg.features.kernels = {base};
    cfg.features.seed = 4;
    cfg.p = 1;
    cfg.weights = {1.0};
    cfg.lambda = lambda;
    const FittedModel model = fit(data, cfg);
    double acc = 0.0;
    for (int k = 0; k < 200; ++k) {
      const double t = k / 199.0;
      const double diff =
          model.predict({&t, 1}) - exact_predict(exact, {&t, 1});
      acc += diff * diff;
    }
    return std::sqrt(acc / 200.0);
  };
  const double gap_small = rms_gap(64);
  const double gap_big = rms_gap(4096);
  CHECK(gap_big < 0.05);
  CHECK(gap_small > gap_big);
}

TEST_CASE("model export reloads bit-identically") {
  const MixedDataset data = make_dataset(2, 2, 20, 15, 0.05, 121);
  FitConfig cfg = make_config(2, 5, 0.5, 123);
  cfg.p = 2;
  cfg.weights = {0.9, 1.3};
  cfg.lambda = 2e-5;
  const FittedModel model = fit(data, cfg);
  const std::string path = "/tmp/gradfit_test.model";
  model.save(path);
  const FittedModel loaded = FittedModel::load(path);
  CHECK(loaded.p() == 2);
  CHECK(loaded.lambda_used() == model.lambda_used());
  CHECK(loaded.coeffs().size() == model.coeffs().size());
  for (Eigen::Index i = 0; i < model.coeffs().size(); ++i) {
    CHECK(loaded.coeffs()(i) == model.coeffs()(i));
  }
  Rng rng(9);
  for (int k = 0; k < 25; ++k) {
    const std::vector<double> t{rng.uniform(), rng.uniform()};
    CHECK(loaded.predict(t) == model.predict(t));
    CHECK(loaded.predict_grad(t, 1) == model.predict_grad(t, 1));
  }
}

TEST_CASE("physical-box rescaling is an exact reparameterization") {
  // truth sin on [2, 6]; gradients observed in physical units
  MixedDataset phys;
  phys.d = 1;
  phys.box = DomainBox{{2.0}, {6.0}};
  const Eigen::Index n = 40;
  phys.func.t.resize(n, 1);
  phys.func.y.resize(n);
  phys.grads.resize(1);
  phys.grads[0].t.resize(n, 1);
  phys.grads[0].y.resize(n);
  Rng rng(131);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = rng.uniform(2.0, 6.0);
    phys.func.t(i, 0) = t;
    phys.func.y(i) = std::sin(t) + 0.01 * rng.normal();
    phys.grads[0].t(i, 0) = t;
    phys.grads[0].y(i) = std::cos(t) + 0.01 * rng.normal();
  }
  // manually rescaled twin on the unit box
  MixedDataset unit = phys;
  unit.box = DomainBox::unit(1);
  unit.func.t = ((phys.func.t.array() - 2.0) / 4.0).matrix();
  unit.grads[0].t = ((phys.grads[0].t.array() - 2.0) / 4.0).matrix();
  unit.grads[0].y = 4.0 * phys.grads[0].y;

  FitConfig cfg = make_config(1, 32, 0.3, 133);
  cfg.p = 1;
  cfg.lambda = 1e-6;
  const FittedModel mp = fit(phys, cfg);
  const FittedModel mu = fit(unit, cfg);
  for (int k = 0; k <= 20; ++k) {
    const double t = 2.0 + 4.0 * k / 20.0;
    const double ts = (t - 2.0) / 4.0;
    CHECK(mp.predict({&t, 1}) ==
          doctest::Approx(mu.predict({&ts, 1})).epsilon(1e-10));
    CHECK(mp.predict_grad({&t, 1}, 0) ==
          doctest::Approx(mu.predict_grad({&ts, 1}, 0) / 4.0).epsilon(1e-10));
  }
  // analytic identity: predicted gradient differentiates predict in
  // physical units
  for (int k = 0; k < 20; ++k) {
    const double t = rng.uniform(2.1, 5.9);
    const double h = 1e-5;
    const double tp = t + h, tm = t - h;
    const double fd = (mp.predict({&tp, 1}) - mp.predict({&tm, 1})) / (2.0 * h);
    CHECK(mp.predict_grad({&t, 1}, 0) ==
          doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("singular system at lambda zero raises a rank error") {
  // duplicated design points with more features than information
  MixedDataset data;
  data.d = 1;
  data.box = DomainBox::unit(1);
  data.func.t.resize(6, 1);
  data.func.y.resize(6);
  for (Eigen::Index i = 0; i < 6; ++i) {
    data.func.t(i, 0) = 0.5;  // all identical
    data.func.y(i) = static_cast<double>(i);
  }
  FitConfig cfg = make_config(1, 8, 0.4, 141);
  cfg.p = 0;
  cfg.lambda = 0.0;
  CHECK_THROWS_AS((void)fit(data, cfg), RankError);
}
