#include "gradfit/feature_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "gradfit/errors.hpp"
#include "gradfit/rng.hpp"
#include "gradfit/simd/simd_ops.hpp"

namespace gradfit {

namespace {

double binom(int n, int k) {
  double v = 1.0;
  for (int i = 1; i <= k; ++i) v *= static_cast<double>(n - k + i) / i;
  return v;
}

// Lexicographic k-subsets of {0..d-1}.
void for_each_subset(int d, int k, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> c(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) c[static_cast<std::size_t>(i)] = i;
  while (true) {
    fn(c);
    int i = k - 1;
    while (i >= 0 && c[static_cast<std::size_t>(i)] == d - k + i) --i;
    if (i < 0) break;
    ++c[static_cast<std::size_t>(i)];
    for (int l = i + 1; l < k; ++l) {
      c[static_cast<std::size_t>(l)] = c[static_cast<std::size_t>(l - 1)] + 1;
    }
  }
}

}  // namespace

struct FeatureMap::Tables {
  std::vector<double> sin_buf, cos_buf;   // d*s each
  std::vector<double> deriv0, deriv1, deriv2;
  std::vector<double> buf_a, buf_b;       // block expansion ping-pong
  std::vector<char> have;                 // 3*d flags, per (order, coord)
};

FeatureMap FeatureMap::build(const FeatureMapConfig& cfg) {
  if (cfg.d < 1) throw ConfigError("feature map: d must be >= 1");
  if (cfg.r < 1 || cfg.r > cfg.d) {
    throw ConfigError("feature map: r must be in [1, d]");
  }
  if (cfg.s < 1) throw ConfigError("feature map: s must be >= 1");
  if (static_cast<int>(cfg.kernels.size()) != cfg.d) {
    throw ConfigError("feature map: need one kernel spec per coordinate");
  }
  if (cfg.p_max < 0 || cfg.p_max > cfg.d) {
    throw ConfigError("feature map: p_max must be in [0, d]");
  }
  for (const auto& k : cfg.kernels) {
    k.validate();
    if (cfg.p_max >= 1 && !k.differentiable()) {
      throw NonDifferentiableError(
          "laplacian kernel cannot serve gradient features");
    }
  }
  const double top_family =
      binom(cfg.d, cfg.r) * std::pow(static_cast<double>(cfg.s), cfg.r);
  if (top_family > static_cast<double>(cfg.block_cap)) {
    throw CapacityError("feature map: C(d,r)*s^r exceeds the block cap");
  }

  FeatureMap map;
  map.cfg_ = cfg;
  map.scale_ = std::sqrt(2.0 / static_cast<double>(cfg.s));

  std::size_t offset = 0;
  for (int k = 1; k <= cfg.r; ++k) {
    for_each_subset(cfg.d, k, [&](const std::vector<int>& coords) {
      FeatureBlock blk;
      blk.coords = coords;
      blk.offset = offset;
      blk.len = 1;
      for (int i = 0; i < k; ++i) blk.len *= static_cast<std::size_t>(cfg.s);
      offset += blk.len;
      map.blocks_.push_back(std::move(blk));
    });
  }
  map.dim_ = offset;

  const auto su = static_cast<std::size_t>(cfg.s);
  map.omegas_.resize(static_cast<std::size_t>(cfg.d) * su);
  map.phases_.resize(static_cast<std::size_t>(cfg.d) * su);
  for (int j = 0; j < cfg.d; ++j) {
    const auto fs = sample_frequencies(
        cfg.kernels[static_cast<std::size_t>(j)], cfg.s,
        derive_seed(cfg.seed, static_cast<std::uint64_t>(j)));
    std::copy(fs.omegas.begin(), fs.omegas.end(),
              map.omegas_.begin() + static_cast<std::size_t>(j) * su);
    std::copy(fs.phases.begin(), fs.phases.end(),
              map.phases_.begin() + static_cast<std::size_t>(j) * su);
  }
  return map;
}

std::span<const double> FeatureMap::omegas(int j) const {
  const auto su = static_cast<std::size_t>(cfg_.s);
  return {omegas_.data() + static_cast<std::size_t>(j) * su, su};
}

std::span<const double> FeatureMap::phases(int j) const {
  const auto su = static_cast<std::size_t>(cfg_.s);
  return {phases_.data() + static_cast<std::size_t>(j) * su, su};
}

void FeatureMap::coordinate_basis(double tj, int j, int deriv,
                                  std::span<double> out) const {
  const auto& o = simd::ops();
  const auto su = static_cast<std::size_t>(cfg_.s);
  const double* w = omegas_.data() + static_cast<std::size_t>(j) * su;
  const double* b = phases_.data() + static_cast<std::size_t>(j) * su;
  thread_local std::vector<double> sin_buf, cos_buf;
  sin_buf.resize(su);
  cos_buf.resize(su);
  o.sincos_affine(tj, w, b, su, sin_buf.data(), cos_buf.data());
  switch (deriv) {
    case 0: o.scale(cos_buf.data(), scale_, su, out.data()); break;
    case 1: o.scale_mul(sin_buf.data(), w, -scale_, su, out.data()); break;
    case 2: o.scale_mul_sq(cos_buf.data(), w, -scale_, su, out.data()); break;
    default: throw ConfigError("coordinate_basis: deriv must be 0, 1 or 2");
  }
}

// Evaluate the map with per-coordinate derivative orders. A block
// contributes only when it contains every coordinate of nonzero order;
// other blocks are written as zeros.
void FeatureMap::eval_with_orders(std::span<const double> t,
                                  std::span<const int> orders,
                                  std::span<double> out) const {
  if (static_cast<int>(t.size()) != cfg_.d) {
    throw ConfigError("feature map: point dimension mismatch");
  }
  if (out.size() != dim_) {
    throw ConfigError("feature map: output span has wrong length");
  }
  const auto& o = simd::ops();
  const auto su = static_cast<std::size_t>(cfg_.s);
  const auto du = static_cast<std::size_t>(cfg_.d);

  thread_local Tables tls;
  tls.sin_buf.resize(du * su);
  tls.cos_buf.resize(du * su);
  tls.deriv0.resize(du * su);
  tls.deriv1.resize(du * su);
  tls.deriv2.resize(du * su);
  tls.have.assign(3 * du, 0);
  std::size_t inter = 1;
  for (int i = 0; i + 1 < cfg_.r; ++i) inter *= su;
  tls.buf_a.resize(inter);
  tls.buf_b.resize(inter);

  for (std::size_t j = 0; j < du; ++j) {
    o.sincos_affine(t[j], omegas_.data() + j * su, phases_.data() + j * su,
                    su, tls.sin_buf.data() + j * su,
                    tls.cos_buf.data() + j * su);
  }
  auto table = [&](int order, int j) -> const double* {
    const auto ju = static_cast<std::size_t>(j);
    char& flag = tls.have[static_cast<std::size_t>(order) * du + ju];
    double* dst = (order == 0 ? tls.deriv0 : order == 1 ? tls.deriv1
                                                        : tls.deriv2)
                      .data() +
                  ju * su;
    if (!flag) {
      const double* w = omegas_.data() + ju * su;
      if (order == 0) {
        o.scale(tls.cos_buf.data() + ju * su, scale_, su, dst);
      } else if (order == 1) {
        o.scale_mul(tls.sin_buf.data() + ju * su, w, -scale_, su, dst);
      } else {
        o.scale_mul_sq(tls.cos_buf.data() + ju * su, w, -scale_, su, dst);
      }
      flag = 1;
    }
    return dst;
  };

  const double* factors[64];
  for (const auto& blk : blocks_) {
    bool active = true;
    for (std::size_t j = 0; j < du && active; ++j) {
      if (orders[j] > 0 &&
          !std::binary_search(blk.coords.begin(), blk.coords.end(),
                              static_cast<int>(j))) {
        active = false;
      }
    }
    double* dst = out.data() + blk.offset;
    if (!active) {
      std::memset(dst, 0, blk.len * sizeof(double));
      continue;
    }
    const int k = static_cast<int>(blk.coords.size());
    for (int i = 0; i < k; ++i) {
      const int c = blk.coords[static_cast<std::size_t>(i)];
      factors[i] = table(orders[static_cast<std::size_t>(c)], c);
    }
    if (k == 1) {
      std::memcpy(dst, factors[0], su * sizeof(double));
      continue;
    }
    const double* cur = factors[0];
    std::size_t len = su;
    for (int i = 1; i < k; ++i) {
      double* next = (i == k - 1)
                         ? dst
                         : (cur == tls.buf_a.data() ? tls.buf_b.data()
                                                    : tls.buf_a.data());
      o.outer_expand(cur, len, factors[i], su, next);
      cur = next;
      len *= su;
    }
  }
}

void FeatureMap::features(std::span<const double> t,
                          std::span<double> out) const {
  thread_local std::vector<int> orders;
  orders.assign(static_cast<std::size_t>(cfg_.d), 0);
  eval_with_orders(t, orders, out);
}

void FeatureMap::features_grad(std::span<const double> t, int j,
                               std::span<double> out) const {
  if (j < 0 || j >= cfg_.d) throw ConfigError("features_grad: bad coordinate");
  for (const auto& k : cfg_.kernels) {
    if (!k.differentiable()) {
      throw NonDifferentiableError(
          "gradient features need differentiable kernels");
    }
  }
  thread_local std::vector<int> orders;
  orders.assign(static_cast<std::size_t>(cfg_.d), 0);
  orders[static_cast<std::size_t>(j)] = 1;
  eval_with_orders(t, orders, out);
}

void FeatureMap::features_hess(std::span<const double> t, int j, int j2,
                               std::span<double> out) const {
  if (j < 0 || j >= cfg_.d || j2 < 0 || j2 >= cfg_.d) {
    throw ConfigError("features_hess: bad coordinate");
  }
  for (const auto& k : cfg_.kernels) {
    if (!k.differentiable()) {
      throw NonDifferentiableError(
          "gradient features need differentiable kernels");
    }
  }
  thread_local std::vector<int> orders;
  orders.assign(static_cast<std::size_t>(cfg_.d), 0);
  orders[static_cast<std::size_t>(j)] += 1;
  orders[static_cast<std::size_t>(j2)] += 1;
  eval_with_orders(t, orders, out);
}

void FeatureMap::augmented(std::span<const double> t, int p,
                           std::span<double> out) const {
  if (p < 0 || p > cfg_.p_max) {
    throw ConfigError("augmented: p must be in [0, p_max]");
  }
  if (out.size() != dim_ * static_cast<std::size_t>(p + 1)) {
    throw ConfigError("augmented: output span has wrong length");
  }
  features(t, out.subspan(0, dim_));
  for (int g = 1; g <= p; ++g) {
    features_grad(t, g - 1,
                  out.subspan(static_cast<std::size_t>(g) * dim_, dim_));
  }
}

void FeatureMap::augmented_grad(std::span<const double> t, int g, int p,
                                std::span<double> out) const {
  if (p < 0 || p > cfg_.p_max) {
    throw ConfigError("augmented_grad: p must be in [0, p_max]");
  }
  if (g < 0 || g >= cfg_.d) throw ConfigError("augmented_grad: bad coordinate");
  if (out.size() != dim_ * static_cast<std::size_t>(p + 1)) {
    throw ConfigError("augmented_grad: output span has wrong length");
  }
  features_grad(t, g, out.subspan(0, dim_));
  for (int l = 1; l <= p; ++l) {
    features_hess(t, g, l - 1,
                  out.subspan(static_cast<std::size_t>(l) * dim_, dim_));
  }
}

AugmentedFeatures augmented_features(const FeatureMap& map,
                                     std::span<const double> t, int p) {
  AugmentedFeatures out;
  out.value.resize(map.dim());
  map.features(t, out.value);
  out.grads.resize(static_cast<std::size_t>(p));
  for (int g = 0; g < p; ++g) {
    auto& v = out.grads[static_cast<std::size_t>(g)];
    v.resize(map.dim());
    map.features_grad(t, g, v);
  }
  return out;
}

}  // namespace gradfit
