#include <drkrnet/krnet.hpp>

#include "fd_oracle.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <numbers>

using namespace drkrnet;
using drkrnet::testing::central_differences;
using drkrnet::testing::max_relative_error;

namespace {

FlowConfig config(std::size_t d, std::size_t K, std::size_t L, std::size_t width = 16) {
  FlowConfig c;
  c.dim = d;
  c.n_groups = K;
  c.layers_per_stage = L;
  c.hidden_width = width;
  c.seed = 5;
  return c;
}

/// Freshly initialized flow with the (zero) output layers perturbed, so every
/// coupling has a nontrivial, input-dependent scale and shift. Relu shifts grow
/// linearly in |x| and compound over layers, so the perturbation shrinks with
/// depth and width to keep the total log-determinant O(10).
FlowParams random_flow(const FlowConfig &cfg, std::uint64_t seed, double strength = 0.2) {
  auto f = init_flow(cfg);
  std::mt19937_64 rng(seed);
  const double depth = static_cast<double>(cfg.hidden_width * f.layers.size());
  std::normal_distribution<double> N(0.0, strength / std::sqrt(depth));
  const std::string last = "/W" + std::to_string(cfg.hidden_depth);
  const std::string last_b = "/b" + std::to_string(cfg.hidden_depth);
  for (auto &[name, t] : f.params)
    if (name.ends_with(last) || name.ends_with(last_b))
      for (auto &v : t.storage())
        v += N(rng);
  return f;
}

/// Dense Jacobian of the forward map at x by central differences, evaluated as
/// one batch of 2d perturbed points. The step is small because a probe pair
/// straddling a relu kink in any coupling net biases the column by O(h).
Eigen::MatrixXd numerical_jacobian(const FlowParams &f, const Tensor &x, double h = 1e-7,
                                   std::size_t stage_begin = 0,
                                   std::size_t stage_end = std::numeric_limits<std::size_t>::max()) {
  const std::size_t d = f.config.dim;
  Tensor probe(Shape{2 * d, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) {
      probe.at(2 * j, k) = x[k] + (k == j ? h : 0.0);
      probe.at(2 * j + 1, k) = x[k] - (k == j ? h : 0.0);
    }
  const Tensor z = krnet_forward(probe, f, stage_begin, stage_end).first;
  Eigen::MatrixXd J(d, d);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i)
      J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (z.at(2 * j, i) - z.at(2 * j + 1, i)) / (2 * h);
  return J;
}

double log_abs_det(const Eigen::MatrixXd &J) {
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
  double s = 0.0;
  for (Eigen::Index i = 0; i < J.rows(); ++i)
    s += std::log(std::abs(lu.matrixLU()(i, i)));
  return s;
}

Tensor normal_points(std::size_t n, std::size_t d, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  Tensor x = standard_normal(n, d, rng);
  for (auto &v : x.storage())
    v *= sd;
  return x;
}

void set_constant_layer(FlowParams &f, std::size_t layer, double s, double t) {
  const auto &l = f.layers[layer];
  const auto shape = coupling_shape(f.config, l.split);
  const std::size_t last = shape.widths.size() - 2;
  auto &w = f.params.at(weight_name(l.prefix, last));
  std::fill(w.storage().begin(), w.storage().end(), 0.0);
  auto &b = f.params.at(bias_name(l.prefix, last));
  const std::size_t m = l.split.transformed.size();
  for (std::size_t k = 0; k < m; ++k) {
    b[k] = std::atanh(s / f.config.scale_bound);
    b[m + k] = t;
  }
}

} // namespace

TEST(FlowSchedule, StagesAndSplits) {
  const auto cfg = config(12, 4, 3);
  const auto f = init_flow(cfg);
  EXPECT_EQ(f.schedule(), (std::vector<std::size_t>{12, 9, 6}));
  ASSERT_EQ(f.layers.size(), 9u);
  EXPECT_EQ(f.layers[0].split.kept, (std::vector<std::size_t>{0, 2, 4, 6, 8, 10}));
  EXPECT_EQ(f.layers[1].split.kept, (std::vector<std::size_t>{1, 3, 5, 7, 9, 11}));
  EXPECT_EQ(f.layers[3].split.transformed, (std::vector<std::size_t>{1, 3, 5, 7}));
  EXPECT_EQ(f.layers[8].active, 6u);
}

TEST(FlowSchedule, RejectsBadConfigs) {
  EXPECT_THROW(init_flow(config(10, 4, 2)), ValidationError);
  EXPECT_THROW(init_flow(config(8, 1, 2)), ValidationError);
  EXPECT_THROW(init_flow(config(8, 4, 0)), ValidationError);
}

TEST(Coupling, ZeroNetIsIdentity) {
  const auto cfg = config(6, 3, 1);
  ParamStore p;
  const CouplingSplit split{{0, 2, 4}, {1, 3, 5}};
  std::mt19937_64 rng(1);
  init_mlp(p, "c", coupling_shape(cfg, split), rng, true);
  const Tensor x = Tensor::vector({0.3, -1, 2, 0.5, -0.1, 4});
  const auto [z, ld] = coupling_forward(x, p, "c", split, cfg);
  EXPECT_EQ(z, x);
  EXPECT_EQ(ld, 0.0);
}

TEST(Coupling, ConstantScaleDoublesTransformedPart) {
  const auto cfg = config(6, 3, 1);
  ParamStore p;
  const CouplingSplit split{{0, 2, 4}, {1, 3, 5}};
  std::mt19937_64 rng(1);
  init_mlp(p, "c", coupling_shape(cfg, split), rng, true);
  auto &b = p.at(bias_name("c", 2));
  for (std::size_t k = 0; k < 3; ++k)
    b[k] = std::atanh(std::log(2.0) / cfg.scale_bound);
  const Tensor x = Tensor::vector({0.3, -1, 2, 0.5, -0.1, 4});
  const auto [z, ld] = coupling_forward(x, p, "c", split, cfg);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(z[i], i % 2 ? 2 * x[i] : x[i], 1e-14);
  EXPECT_NEAR(ld, 3 * std::log(2.0), 1e-14);
}

TEST(Coupling, RandomLayerLogdetMatchesJacobian) {
  const auto cfg = config(6, 3, 1);
  auto f = random_flow(cfg, 3, 0.5);
  // Use only the first layer.
  f.layers.resize(1);
  const Tensor x = Tensor::vector({0.3, -1, 2, 0.5, -0.1, 1.2});
  const auto [z, ld] = krnet_forward(x, f);
  EXPECT_NEAR(ld[0], log_abs_det(numerical_jacobian(f, x)), 1e-6);
}

TEST(Flow, IdentityAtInitialization) {
  const auto f = init_flow(config(8, 4, 2));
  const Tensor x = normal_points(5, 8, 1);
  const auto [z, ld] = krnet_forward(x, f);
  EXPECT_EQ(z, x);
  for (double v : ld.storage())
    EXPECT_EQ(v, 0.0);
  EXPECT_EQ(krnet_inverse(x, f).first, x);
}

TEST(Flow, IdentityDensityIsStandardNormal) {
  const auto f = init_flow(config(2, 2, 3));
  EXPECT_NEAR(log_density(Tensor::vector({0.0, 0.0}), f)[0], -1.8378771, 1e-7);
}

TEST(Flow, HandComposedSingleLayer) {
  auto f = init_flow(config(4, 2, 1));
  set_constant_layer(f, 0, 0.5, -0.25);
  const Tensor x = Tensor::vector({1.0, 2.0, -3.0, 4.0});
  const auto [z, ld] = krnet_forward(x, f);
  const double e = std::exp(0.5);
  const std::vector<double> want{1.0, 2.0 * e - 0.25, -3.0, 4.0 * e - 0.25};
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(z[i], want[i], 1e-14);
  EXPECT_NEAR(ld[0], 1.0, 1e-14);
}

TEST(Flow, RoundTripOverThousandPointsUpToD64) {
  for (auto [d, K] : {std::pair<std::size_t, std::size_t>{4, 2}, {8, 4}, {16, 4}, {36, 6},
                      {64, 8}}) {
    const auto f = random_flow(config(d, K, 8, 48), d);
    const Tensor x = normal_points(1000, d, 100 + d);
    const auto [z, ld] = krnet_forward(x, f);
    const auto [xr, ldi] = krnet_inverse(z, f);
    const auto [zr, ldr] = krnet_forward(krnet_inverse(x, f).first, f);
    double worst = 0.0, worst_z = 0.0, worst_ld = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max(worst, std::abs(xr[i] - x[i]));
      worst_z = std::max(worst_z, std::abs(zr[i] - x[i]));
    }
    for (std::size_t i = 0; i < ld.size(); ++i)
      worst_ld = std::max(worst_ld, std::abs(ld[i] - ldi[i]));
    EXPECT_LT(worst, 1e-10) << "d=" << d;
    EXPECT_LT(worst_z, 1e-10) << "d=" << d;
    EXPECT_LT(worst_ld, 1e-10) << "d=" << d;
  }
}

TEST(Flow, LogdetMatchesNumericalJacobian) {
  for (auto [d, K, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{8, 4, 1000},
                         {64, 8, 1000}}) {
    const auto f = random_flow(config(d, K, 8, 48), 7 * d);
    const Tensor x = normal_points(n, d, d);
    const Tensor ld = krnet_forward(x, f).second;
    double worst = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      worst = std::max(worst, std::abs(ld[r] - log_abs_det(numerical_jacobian(f, x.row(r)))));
    EXPECT_LT(worst, 1e-5) << "d=" << d;
  }
}

TEST(Flow, LogdetIsSumOfLayerLogdets) {
  const auto f = random_flow(config(8, 4, 3), 4);
  const Tensor x = normal_points(3, 8, 9);
  const Tensor total = krnet_forward(x, f).second;
  Tensor cur = x;
  std::vector<double> acc(3, 0.0);
  for (std::size_t t = 0; t < f.config.stages(); ++t) {
    auto [z, ld] = krnet_forward(cur, f, t, t + 1);
    for (std::size_t r = 0; r < 3; ++r)
      acc[r] += ld[r];
    cur = z;
  }
  for (std::size_t r = 0; r < 3; ++r)
    EXPECT_NEAR(total[r], acc[r], 1e-12);
}

TEST(Flow, FrozenCoordinatesAreBitwisePreserved) {
  const auto f = random_flow(config(12, 4, 4), 6);
  const Tensor x = normal_points(4, 12, 3);
  for (std::size_t t = 0; t < f.config.stages(); ++t) {
    const Tensor before = krnet_forward(x, f, 0, t + 1).first;
    const Tensor after = krnet_forward(x, f).first;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t i = f.config.active(t + 1); i < f.config.active(t); ++i)
        EXPECT_EQ(after.at(r, i), before.at(r, i));
  }
  // Inverse: the coordinates frozen at stage t enter the inverse of stages < t untouched.
  const Tensor z = krnet_forward(x, f).first;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = f.config.active(f.config.stages() - 1); i < 12; ++i)
      EXPECT_NE(z.at(r, i), x.at(r, i));
}

TEST(Flow, JacobianSparsityFollowsSchedule) {
  // From the state entering stage t onwards, active outputs depend only on
  // active inputs and deactivated coordinates pass through unchanged.
  const auto f = random_flow(config(12, 4, 3), 8);
  const Tensor x = normal_points(1, 12, 4).row(0);
  for (std::size_t t = 0; t < f.config.stages(); ++t) {
    const auto J = numerical_jacobian(f, x, 1e-6, t);
    const std::size_t a = f.config.active(t);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) {
        const double v = J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (i >= a || j >= a) {
          if (i == j)
            EXPECT_NEAR(v, 1.0, 1e-9) << "t=" << t << " i=" << i;
          else
            EXPECT_EQ(v, 0.0) << "t=" << t << " i=" << i << " j=" << j;
        } else if (i == j) {
          EXPECT_NE(v, 0.0);
        }
      }
  }
}

TEST(Flow, ImportanceSampledNormalization) {
  const auto f = random_flow(config(2, 2, 4, 16), 21, 0.2);
  const std::size_t n = 100000;
  const Tensor x = normal_points(n, 2, 77, 2.0);
  const Tensor lq = log_density(x, f);
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double a = x.at(r, 0), b = x.at(r, 1);
    const double lp = -(a * a + b * b) / 8.0 - std::log(8.0 * std::numbers::pi);
    acc += std::exp(lq[r] - lp);
  }
  EXPECT_NEAR(acc / n, 1.0, 0.02);
}

TEST(Flow, InverseSamplesMatchDensityHistogram) {
  const auto f = random_flow(config(2, 2, 4, 16), 21, 0.2);
  const std::size_t n = 200000;
  const Tensor x = krnet_inverse(normal_points(n, 2, 5), f).first;
  const double lo = -3.0, w = 0.5;
  const int bins = 12;
  std::vector<double> counts(bins * bins, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const int a = static_cast<int>(std::floor((x.at(r, 0) - lo) / w));
    const int b = static_cast<int>(std::floor((x.at(r, 1) - lo) / w));
    if (a >= 0 && a < bins && b >= 0 && b < bins)
      counts[a * bins + b] += 1;
  }
  // Bin probabilities by 6x6 midpoint quadrature of q.
  const int sub = 6;
  Tensor pts(Shape{static_cast<std::size_t>(bins * bins * sub * sub), 2});
  std::size_t k = 0;
  for (int a = 0; a < bins; ++a)
    for (int b = 0; b < bins; ++b)
      for (int u = 0; u < sub; ++u)
        for (int v = 0; v < sub; ++v, ++k) {
          pts.at(k, 0) = lo + w * (a + (u + 0.5) / sub);
          pts.at(k, 1) = lo + w * (b + (v + 0.5) / sub);
        }
  const Tensor lq = log_density(pts, f);
  int checked = 0;
  for (int c = 0; c < bins * bins; ++c) {
    double p = 0.0;
    for (int s = 0; s < sub * sub; ++s)
      p += std::exp(lq[c * sub * sub + s]);
    p *= w * w / (sub * sub);
    const double expected = p * n;
    if (expected < 100)
      continue;
    ++checked;
    EXPECT_LT(std::abs(counts[c] - expected), 4.0 * std::sqrt(expected) + 0.01 * expected)
        << "bin " << c;
  }
  EXPECT_GT(checked, 20);
}

TEST(Flow, LogDensityGradientsMatchFiniteDifferences) {
  const auto f = random_flow(config(4, 2, 2, 6), 13, 0.4);
  const Tensor x = normal_points(3, 4, 2);
  const Program prog = [&](Tape &t, const BoundParams &bp, const Tensor &in) {
    return sum(flow_log_density(bp, f, t.constant(in)));
  };
  const auto ev = evaluate_with_gradients(prog, f.params, x);
  const auto fd = central_differences(
      [&](const ParamStore &s) {
        FlowParams g = f;
        g.params = s;
        const Tensor lq = log_density(x, g);
        return lq[0] + lq[1] + lq[2];
      },
      f.params);
  EXPECT_LT(max_relative_error(ev.gradients, fd), 1e-5);
}

TEST(Flow, ShapeMismatchAndNonFiniteInput) {
  const auto f = init_flow(config(4, 2, 1));
  EXPECT_THROW(krnet_forward(Tensor::vector({1, 2, 3}), f), ShapeError);
  EXPECT_THROW(log_density(Tensor::vector({1, 2, std::nan(""), 3}), f), NumericalError);
}

TEST(Flow, ParamsReloadThroughContainer) {
  const auto f = random_flow(config(8, 4, 2), 3);
  const auto g = flow_from_params(f.config, deserialize(serialize(f.params)));
  const Tensor x = normal_points(4, 8, 1);
  EXPECT_EQ(krnet_forward(x, f).first, krnet_forward(x, g).first);
  EXPECT_THROW(flow_from_params(config(8, 2, 2), f.params), std::exception);
}
