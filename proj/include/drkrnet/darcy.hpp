#pragma once

// Node-centred finite-volume discretization of
//   -div(exp(y) grad u) = h  on (0,1)^2,
//   u = u_left / u_right on s1 = 0 / s1 = 1,
//   exp(y) grad u . n = 0 on s2 = 0 and s2 = 1,
// with harmonic averaging of exp(y) on control-volume faces.

#include "grf.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <array>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace drkrnet {

struct PressureField {
  Tensor values; // H x W
  Grid grid;
};

using SourceFunction = std::function<double(double s1, double s2)>;

inline SourceFunction constant_source(double h) {
  return [h](double, double) { return h; };
}

struct DirichletData {
  double left = 0.0;
  double right = 0.0;
};

struct DarcySystem {
  Eigen::SparseMatrix<double> matrix;
  Eigen::VectorXd rhs;
  std::vector<long> unknown_of_node; // -1 on Dirichlet columns
};

namespace detail {

inline double harmonic_mean(double a, double b) { return 2.0 * a * b / (a + b); }

inline void check_log_perm(const Tensor &log_perm, const Grid &grid) {
  if (log_perm.size() != grid.points())
    throw ShapeError("log-permeability " + shape_string(log_perm.shape()) +
                     " does not match a " + std::to_string(grid.H) + "x" +
                     std::to_string(grid.W) + " grid");
  if (!log_perm.all_finite())
    throw NumericalError("log-permeability contains non-finite values");
}

} // namespace detail

inline DarcySystem assemble_darcy_system(const Tensor &log_perm, const Grid &grid,
                                         const SourceFunction &source,
                                         DirichletData dirichlet = {}) {
  detail::check_log_perm(log_perm, grid);
  const std::size_t H = grid.H, W = grid.W;
  const double hx = grid.dx1(), hy = grid.dx2();

  DarcySystem sys;
  sys.unknown_of_node.assign(H * W, -1);
  long n = 0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 1; j + 1 < W; ++j)
      sys.unknown_of_node[i * W + j] = n++;

  auto perm = [&](std::size_t i, std::size_t j) { return std::exp(log_perm[i * W + j]); };
  auto boundary_value = [&](std::size_t j) { return j == 0 ? dirichlet.left : dirichlet.right; };

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(n) * 5);
  sys.rhs = Eigen::VectorXd::Zero(n);

  for (std::size_t i = 0; i < H; ++i) {
    const double wy = (i == 0 || i + 1 == H) ? 0.5 * hy : hy;
    for (std::size_t j = 1; j + 1 < W; ++j) {
      const long row = sys.unknown_of_node[i * W + j];
      const double a = perm(i, j);
      double diag = 0.0;
      auto couple = [&](std::size_t ii, std::size_t jj, double coeff) {
        diag += coeff;
        const long col = sys.unknown_of_node[ii * W + jj];
        if (col >= 0)
          trips.emplace_back(row, col, -coeff);
        else
          sys.rhs(row) += coeff * boundary_value(jj);
      };
      couple(i, j - 1, detail::harmonic_mean(a, perm(i, j - 1)) * wy / hx);
      couple(i, j + 1, detail::harmonic_mean(a, perm(i, j + 1)) * wy / hx);
      if (i > 0)
        couple(i - 1, j, detail::harmonic_mean(a, perm(i - 1, j)) * hx / hy);
      if (i + 1 < H)
        couple(i + 1, j, detail::harmonic_mean(a, perm(i + 1, j)) * hx / hy);
      trips.emplace_back(row, row, diag);
      sys.rhs(row) += source(grid.s1(j), grid.s2(i)) * hx * wy;
    }
  }
  sys.matrix.resize(n, n);
  sys.matrix.setFromTriplets(trips.begin(), trips.end());
  return sys;
}

inline PressureField solve_darcy(const Tensor &log_perm, const Grid &grid,
                                 const SourceFunction &source, DirichletData dirichlet = {}) {
  const DarcySystem sys = assemble_darcy_system(log_perm, grid, source, dirichlet);
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(sys.matrix);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("Darcy system factorization failed (diagonal range " +
                         std::to_string(sys.matrix.diagonal().minCoeff()) + " .. " +
                         std::to_string(sys.matrix.diagonal().maxCoeff()) + ")");
  }
  const Eigen::VectorXd u = solver.solve(sys.rhs);
  const double res = (sys.matrix * u - sys.rhs).norm();
  const double ref = std::max(sys.rhs.norm(), 1e-300);
  if (!(res <= 1e-10 * ref) && !(sys.rhs.norm() == 0.0 && res < 1e-12)) {
    const auto d = solver.vectorD();
    throw NumericalError("Darcy solve residual " + std::to_string(res / ref) +
                         " exceeds 1e-10 (pivot ratio " +
                         std::to_string(d.cwiseAbs().minCoeff() / d.cwiseAbs().maxCoeff()) + ")");
  }

  PressureField out{Tensor(Shape{grid.H, grid.W}), grid};
  for (std::size_t p = 0; p < grid.points(); ++p) {
    const long k = sys.unknown_of_node[p];
    out.values[p] = k >= 0 ? u(k) : ((p % grid.W) == 0 ? dirichlet.left : dirichlet.right);
  }
  return out;
}

inline PressureField solve_darcy(const Tensor &log_perm, const Grid &grid, double source = 3.0) {
  return solve_darcy(log_perm, grid, constant_source(source));
}

/// Flux leaving the domain through the left and right boundaries, computed
/// from the same face transmissibilities the solver uses.
struct BoundaryFluxes {
  double left = 0.0;
  double right = 0.0;
};

inline BoundaryFluxes boundary_fluxes(const Tensor &log_perm, const PressureField &p) {
  const Grid &g = p.grid;
  const double hx = g.dx1(), hy = g.dx2();
  BoundaryFluxes f;
  for (std::size_t i = 0; i < g.H; ++i) {
    const double wy = (i == 0 || i + 1 == g.H) ? 0.5 * hy : hy;
    const std::size_t l0 = i * g.W, r0 = i * g.W + g.W - 1;
    const double kl = detail::harmonic_mean(std::exp(log_perm[l0]), std::exp(log_perm[l0 + 1]));
    const double kr = detail::harmonic_mean(std::exp(log_perm[r0]), std::exp(log_perm[r0 - 1]));
    f.left += kl * (p.values[l0 + 1] - p.values[l0]) / hx * wy;
    f.right += kr * (p.values[r0 - 1] - p.values[r0]) / hx * wy;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

struct ObservationOperator {
  std::vector<std::array<double, 2>> locations; // (s1, s2) in [0,1]^2

  std::size_t size() const { return locations.size(); }

  void validate() const {
    for (const auto &[a, b] : locations)
      if (!(a >= 0.0 && a <= 1.0 && b >= 0.0 && b <= 1.0))
        throw ValidationError("sensor location outside the unit square");
  }
};

/// n x n lattice at start + step*k in both coordinates; s1 varies fastest.
inline ObservationOperator sensor_lattice(std::size_t n, double start, double step) {
  ObservationOperator op;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t a = 0; a < n; ++a)
      op.locations.push_back({start + step * static_cast<double>(a),
                              start + step * static_cast<double>(b)});
  op.validate();
  return op;
}

struct BilinearStencil {
  std::array<std::size_t, 4> nodes;
  std::array<double, 4> weights;
};

inline BilinearStencil bilinear_stencil(const Grid &g, double s1, double s2) {
  const double x = s1 * static_cast<double>(g.W - 1);
  const double y = s2 * static_cast<double>(g.H - 1);
  const auto j0 = std::min(static_cast<std::size_t>(std::floor(x)), g.W - 2);
  const auto i0 = std::min(static_cast<std::size_t>(std::floor(y)), g.H - 2);
  const double tx = x - static_cast<double>(j0), ty = y - static_cast<double>(i0);
  return {{i0 * g.W + j0, i0 * g.W + j0 + 1, (i0 + 1) * g.W + j0, (i0 + 1) * g.W + j0 + 1},
          {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty}};
}

/// Dense [H*W, m] interpolation matrix so that observations = field_row * M.
inline Tensor observation_matrix(const ObservationOperator &op, const Grid &g) {
  op.validate();
  Tensor M(Shape{g.points(), op.size()});
  for (std::size_t k = 0; k < op.size(); ++k) {
    const auto st = bilinear_stencil(g, op.locations[k][0], op.locations[k][1]);
    for (int c = 0; c < 4; ++c)
      M[st.nodes[c] * op.size() + k] += st.weights[c];
  }
  return M;
}

inline std::vector<double> observe(const PressureField &p, const ObservationOperator &op) {
  op.validate();
  std::vector<double> out(op.size());
  for (std::size_t k = 0; k < op.size(); ++k) {
    const auto st = bilinear_stencil(p.grid, op.locations[k][0], op.locations[k][1]);
    double v = 0.0;
    for (int c = 0; c < 4; ++c)
      v += st.weights[c] * p.values[st.nodes[c]];
    out[k] = v;
  }
  return out;
}

struct NoiseModel {
  double level = 0.05;
  std::vector<double> per_sensor_std;
  double floor = 0.0;
};

struct ObservationSet {
  ObservationOperator op;
  std::vector<double> values;
  NoiseModel noise;
};

/// sigma_i = max(level |clean_i|, 0.1 level mean|clean|), values = clean + sigma zeta.
inline ObservationSet add_noise(const ObservationOperator &op, std::span<const double> clean,
                                double level, std::mt19937_64 &rng) {
  if (!(level > 0.0))
    throw ValidationError("noise level must be positive");
  if (clean.size() != op.size())
    throw ShapeError("observation count does not match sensor count");
  double mean_abs = 0.0;
  for (double c : clean)
    mean_abs += std::abs(c);
  mean_abs /= static_cast<double>(clean.size());
  if (mean_abs == 0.0)
    throw ValidationError("noise scale undefined for an all-zero clean observation vector");

  ObservationSet obs;
  obs.op = op;
  obs.noise.level = level;
  obs.noise.floor = 0.1 * level * mean_abs;
  std::normal_distribution<double> N(0.0, 1.0);
  for (double c : clean) {
    const double sigma = std::max(level * std::abs(c), obs.noise.floor);
    obs.noise.per_sensor_std.push_back(sigma);
    obs.values.push_back(c + sigma * N(rng));
  }
  return obs;
}

inline double log_likelihood(const ObservationSet &obs, std::span<const double> predicted) {
  if (predicted.size() != obs.values.size())
    throw ShapeError("predicted observation count " + std::to_string(predicted.size()) +
                     " does not match " + std::to_string(obs.values.size()));
  double ll = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double s = obs.noise.per_sensor_std.at(i);
    if (!(s > 0.0))
      throw ValidationError("non-positive noise scale at sensor " + std::to_string(i));
    const double r = (obs.values[i] - predicted[i]) / s;
    ll += -0.5 * r * r - std::log(s) - 0.5 * 1.8378770664093454835606594728112;
  }
  return ll;
}

} // namespace drkrnet
