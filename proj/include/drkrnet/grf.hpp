#pragma once

// Gaussian random fields with exponential covariance, sampled through a
// truncated Karhunen-Loeve expansion on a uniform grid over [0,1]^2.

#include "tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace drkrnet {

/// Uniform H x W node grid on the unit square. Row i sits at s2 = i/(H-1),
/// column j at s1 = j/(W-1); flat index i*W + j.
struct Grid {
  std::size_t H = 16;
  std::size_t W = 16;

  Grid() = default;
  Grid(std::size_t h, std::size_t w) : H(h), W(w) {
    if (H < 3 || W < 3)
      throw ValidationError("grid must be at least 3x3, got " + std::to_string(H) + "x" +
                            std::to_string(W));
  }

  std::size_t points() const { return H * W; }
  double dx1() const { return 1.0 / static_cast<double>(W - 1); }
  double dx2() const { return 1.0 / static_cast<double>(H - 1); }
  double s1(std::size_t j) const { return static_cast<double>(j) * dx1(); }
  double s2(std::size_t i) const { return static_cast<double>(i) * dx2(); }
  bool operator==(const Grid &) const = default;
};

struct CovarianceSpec {
  double variance = 0.5;
  double length_scale1 = 0.2;
  double length_scale2 = 0.2;
  double mean_value = 1.0;

  void validate() const {
    if (!(variance > 0.0) || !(length_scale1 > 0.0) || !(length_scale2 > 0.0))
      throw ValidationError("covariance needs positive variance and length scales");
  }
};

struct KLBasis {
  Grid grid;
  std::vector<double> eigenvalues;   // descending, all > 0
  std::vector<Tensor> eigenfunctions; // H x W each, orthonormal under the grid dot product
  double energy_fraction = 0.95;
  double total_variance = 0.0;       // sum of all (clipped) eigenvalues

  std::size_t size() const { return eigenvalues.size(); }
};

struct FieldSample {
  Tensor values; // H x W log-permeability
  double length_scale = 0.0;
  std::uint64_t seed = 0;
};

/// Exponential kernel sigma^2 exp(-sqrt((ds1/l1)^2 + (ds2/l2)^2)) at grid nodes.
inline Eigen::MatrixXd assemble_covariance_matrix(const Grid &grid, const CovarianceSpec &spec) {
  spec.validate();
  const auto n = static_cast<Eigen::Index>(grid.points());
  Eigen::MatrixXd C(n, n);
  for (Eigen::Index p = 0; p < n; ++p) {
    const auto ip = static_cast<std::size_t>(p) / grid.W, jp = static_cast<std::size_t>(p) % grid.W;
    for (Eigen::Index q = p; q < n; ++q) {
      const auto iq = static_cast<std::size_t>(q) / grid.W,
                 jq = static_cast<std::size_t>(q) % grid.W;
      const double a = (grid.s1(jp) - grid.s1(jq)) / spec.length_scale1;
      const double b = (grid.s2(ip) - grid.s2(iq)) / spec.length_scale2;
      const double k = spec.variance * std::exp(-std::sqrt(a * a + b * b));
      C(p, q) = k;
      C(q, p) = k;
    }
  }
  return C;
}

/// Eigendecomposition of a symmetric covariance, truncated to the smallest
/// number of modes carrying `energy_fraction` of the total variance.
inline KLBasis truncated_kle(const Eigen::MatrixXd &cov, const Grid &grid,
                             double energy_fraction) {
  if (!(energy_fraction > 0.0 && energy_fraction <= 1.0))
    throw ValidationError("energy fraction must lie in (0, 1]");
  if (cov.rows() != cov.cols() || static_cast<std::size_t>(cov.rows()) != grid.points())
    throw ShapeError("covariance of size " + std::to_string(cov.rows()) + "x" +
                     std::to_string(cov.cols()) + " does not match a " +
                     std::to_string(grid.H) + "x" + std::to_string(grid.W) + " grid");
  const double scale = cov.cwiseAbs().maxCoeff();
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(scale, 1.0))
    throw ValidationError("covariance matrix is not symmetric");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success)
    throw NumericalError("symmetric eigensolver failed");
  const Eigen::VectorXd &vals = eig.eigenvalues(); // ascending
  const Eigen::Index n = vals.size();
  const double lmax = vals(n - 1);
  if (vals(0) < -1e-10 * std::abs(lmax))
    throw NumericalError("covariance has a negative eigenvalue " + std::to_string(vals(0)));

  std::vector<double> desc(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k)
    desc[static_cast<std::size_t>(k)] = std::max(vals(n - 1 - k), 0.0);
  double total = 0.0;
  for (double v : desc)
    total += v;

  KLBasis basis;
  basis.grid = grid;
  basis.energy_fraction = energy_fraction;
  basis.total_variance = total;
  double running = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double lam = desc[static_cast<std::size_t>(k)];
    if (lam <= 0.0)
      break;
    running += lam;
    const Eigen::VectorXd v = eig.eigenvectors().col(n - 1 - k);
    Tensor f(Shape{grid.H, grid.W});
    for (Eigen::Index p = 0; p < v.size(); ++p)
      f[static_cast<std::size_t>(p)] = v(p);
    basis.eigenvalues.push_back(lam);
    basis.eigenfunctions.push_back(std::move(f));
    if (running >= energy_fraction * total * (1.0 - 1e-12))
      break;
  }
  return basis;
}

inline KLBasis build_kl_basis(const Grid &grid, const CovarianceSpec &spec,
                              double energy_fraction = 0.95) {
  return truncated_kle(assemble_covariance_matrix(grid, spec), grid, energy_fraction);
}

/// Field from explicit KL coefficients: m + sum_k sqrt(lambda_k) y_k xi_k.
inline Tensor synthesize_field(const KLBasis &basis, double mean_value,
                               std::span<const double> xi) {
  if (xi.size() != basis.size())
    throw ShapeError("expected " + std::to_string(basis.size()) + " KL coefficients, got " +
                     std::to_string(xi.size()));
  Tensor out(Shape{basis.grid.H, basis.grid.W}, mean_value);
  for (std::size_t k = 0; k < basis.size(); ++k) {
    const double a = std::sqrt(basis.eigenvalues[k]) * xi[k];
    const Tensor &f = basis.eigenfunctions[k];
    for (std::size_t p = 0; p < out.size(); ++p)
      out[p] += a * f[p];
  }
  return out;
}

inline FieldSample sample_field(const KLBasis &basis, const CovarianceSpec &spec,
                                std::mt19937_64 &rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  std::vector<double> xi(basis.size());
  for (auto &v : xi)
    v = N(rng);
  return FieldSample{synthesize_field(basis, spec.mean_value, xi), spec.length_scale1, 0};
}

/// Seed of sample `index` in a dataset keyed by `base_seed` (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t base_seed, std::uint64_t index) {
  std::uint64_t z = base_seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct PriorDatasetSpec {
  Grid grid;
  double variance = 0.5;
  double mean_value = 1.0;
  std::vector<double> length_scales{0.2, 0.25, 0.3};
  std::size_t per_scale = 200;
  double energy_fraction = 0.95;
  std::uint64_t base_seed = 0;
};

/// One truncated KLE per length scale (l1 = l2), per_scale draws each, each
/// draw seeded from (base_seed, global sample index).
inline std::vector<FieldSample> generate_prior_dataset(const PriorDatasetSpec &spec) {
  if (spec.length_scales.empty())
    throw ValidationError("at least one length scale is required");
  if (spec.per_scale == 0)
    throw ValidationError("per_scale must be at least 1");
  std::vector<FieldSample> out;
  out.reserve(spec.length_scales.size() * spec.per_scale);
  std::uint64_t index = 0;
  for (double l : spec.length_scales) {
    const CovarianceSpec cov{spec.variance, l, l, spec.mean_value};
    const KLBasis basis = build_kl_basis(spec.grid, cov, spec.energy_fraction);
    for (std::size_t s = 0; s < spec.per_scale; ++s, ++index) {
      const std::uint64_t seed = derive_seed(spec.base_seed, index);
      std::mt19937_64 rng(seed);
      FieldSample f = sample_field(basis, cov, rng);
      f.length_scale = l;
      f.seed = seed;
      out.push_back(std::move(f));
    }
  }
  return out;
}

/// Flattened fields as a [n, H*W] matrix.
inline Tensor fields_matrix(std::span<const FieldSample> samples) {
  std::vector<Tensor> rows;
  rows.reserve(samples.size());
  for (const auto &s : samples)
    rows.push_back(s.values);
  return stack_rows(rows);
}

// ---------------------------------------------------------------------------
// Dataset file: u32 H, u32 W, u64 count, then per sample
// f64 length_scale, u64 seed, f64[H*W] values. Little-endian.
// ---------------------------------------------------------------------------

inline std::string encode_dataset(const Grid &grid, std::span<const FieldSample> samples) {
  detail::require_little_endian();
  std::string out;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(grid.H));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(grid.W));
  detail::put<std::uint64_t>(out, samples.size());
  for (const auto &s : samples) {
    if (s.values.size() != grid.points())
      throw ShapeError("sample does not match dataset grid");
    detail::put<double>(out, s.length_scale);
    detail::put<std::uint64_t>(out, s.seed);
    out.append(reinterpret_cast<const char *>(s.values.storage().data()),
               s.values.size() * sizeof(double));
  }
  return out;
}

inline std::pair<Grid, std::vector<FieldSample>> decode_dataset(std::string_view bytes) {
  std::size_t pos = 0;
  const auto H = detail::take<std::uint32_t>(bytes, pos);
  const auto W = detail::take<std::uint32_t>(bytes, pos);
  const auto n = detail::take<std::uint64_t>(bytes, pos);
  Grid grid(H, W);
  std::vector<FieldSample> samples;
  samples.reserve(n);
  for (std::uint64_t k = 0; k < n; ++k) {
    FieldSample s;
    s.length_scale = detail::take<double>(bytes, pos);
    s.seed = detail::take<std::uint64_t>(bytes, pos);
    std::vector<double> v(grid.points());
    if (pos + v.size() * sizeof(double) > bytes.size())
      throw ValidationError("truncated dataset payload");
    std::memcpy(v.data(), bytes.data() + pos, v.size() * sizeof(double));
    pos += v.size() * sizeof(double);
    s.values = Tensor(Shape{grid.H, grid.W}, std::move(v));
    samples.push_back(std::move(s));
  }
  if (pos != bytes.size())
    throw ValidationError("trailing bytes after dataset payload");
  return {grid, std::move(samples)};
}

} // namespace drkrnet
