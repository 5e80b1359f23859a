#pragma once

// Physics-constrained surrogate y -> (u, tau1, tau2) for the Darcy problem,
// trained without solutions on the flux-form residual
//   div tau = h,  tau = -exp(y) grad u,  u = 0 left/right,  exp(y) du/ds2 = 0 top/bottom.

#include "adam.hpp"
#include "darcy.hpp"
#include "nn.hpp"
#include "vae.hpp"

namespace drkrnet {

struct SurrogateConfig {
  Grid grid;
  std::vector<std::size_t> hidden{512, 512};
  double output_gain = 0.1;
  std::uint64_t seed = 0;
};

struct SurrogateParams {
  ParamStore params;
  Grid grid;
  std::vector<std::size_t> hidden;

  std::size_t field_size() const { return grid.points(); }

  MlpShape shape() const {
    std::vector<std::size_t> w{field_size()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(3 * field_size());
    return {w, Activation::relu};
  }
};

inline SurrogateParams init_surrogate(const SurrogateConfig &cfg) {
  SurrogateParams p{ParamStore(cfg.seed), cfg.grid, cfg.hidden};
  std::mt19937_64 rng(derive_seed(cfg.seed, 0));
  init_mlp(p.params, "surrogate", p.shape(), rng, false, cfg.output_gain);
  return p;
}

struct SurrogateFields {
  Var u;
  Var tau1;
  Var tau2;
};

/// Batch forward: y [n, H*W] -> three [n, H*W] fields.
inline SurrogateFields surrogate_forward(const BoundParams &bp, const SurrogateParams &p, Var y) {
  Var out = mlp_forward(bp, "surrogate", p.shape(), y);
  const std::size_t P = p.field_size();
  SurrogateFields f{gather_cols(out, detail::iota_index(0, P)),
                    gather_cols(out, detail::iota_index(P, P)),
                    gather_cols(out, detail::iota_index(2 * P, P))};
  return f;
}

struct SurrogateOutput {
  Tensor u, tau1, tau2; // H x W each
};

inline SurrogateOutput surrogate_forward(const Tensor &y, const SurrogateParams &p) {
  if (y.size() != p.field_size())
    throw ShapeError("surrogate input " + shape_string(y.shape()) + " does not match grid");
  if (!y.all_finite())
    throw NumericalError("surrogate input contains non-finite values");
  Tape t;
  BoundParams bp(t, p.params, false);
  const auto f = surrogate_forward(bp, p, t.constant(y.reshaped({1, p.field_size()})));
  const Shape s{p.grid.H, p.grid.W};
  return {t.value(f.u).reshaped(s), t.value(f.tau1).reshaped(s), t.value(f.tau2).reshaped(s)};
}

/// Pressure predictions for a batch [n, H*W] -> [n, H*W].
inline Tensor surrogate_pressure(const Tensor &ys, const SurrogateParams &p) {
  Tape t;
  BoundParams bp(t, p.params, false);
  return t.value(surrogate_forward(bp, p, t.constant(ys)).u);
}

// ---------------------------------------------------------------------------
// Sobel derivatives
// ---------------------------------------------------------------------------

inline constexpr Kernel3 kSobelS1{-1, 0, 1, -2, 0, 2, -1, 0, 1}; // d/ds1, along columns
inline constexpr Kernel3 kSobelS2{-1, -2, -1, 0, 0, 0, 1, 2, 1}; // d/ds2, along rows

inline Var d_ds1(Var f, const Grid &g) {
  return scale(conv3x3(f, g.H, g.W, kSobelS1), 1.0 / (8.0 * g.dx1()));
}

inline Var d_ds2(Var f, const Grid &g) {
  return scale(conv3x3(f, g.H, g.W, kSobelS2), 1.0 / (8.0 * g.dx2()));
}

/// (d/ds1, d/ds2) of an H x W field; exact for linear fields away from the border.
inline std::pair<Tensor, Tensor> spatial_gradient(const Tensor &field, const Grid &g) {
  if (field.size() != g.points())
    throw ShapeError("field " + shape_string(field.shape()) + " does not match grid");
  Tape t;
  Var f = t.constant(field.reshaped({1, g.points()}));
  const Shape s{g.H, g.W};
  return {t.value(d_ds1(f, g)).reshaped(s), t.value(d_ds2(f, g)).reshaped(s)};
}

// ---------------------------------------------------------------------------
// Physics loss
// ---------------------------------------------------------------------------

struct ResidualBreakdown {
  double interior_flux_div = 0.0;
  double flux_consistency = 0.0;
  double dirichlet = 0.0;
  double neumann = 0.0;
  double beta = 100.0;
  double total = 0.0;
};

struct PhysicsMasks {
  Tensor interior; // excludes the one-node boundary ring
  Tensor dirichlet; // columns 0 and W-1
  Tensor neumann;   // rows 0 and H-1 without corners
};

inline PhysicsMasks physics_masks(const Grid &g) {
  PhysicsMasks m{Tensor(Shape{g.points()}), Tensor(Shape{g.points()}), Tensor(Shape{g.points()})};
  for (std::size_t i = 0; i < g.H; ++i)
    for (std::size_t j = 0; j < g.W; ++j) {
      const std::size_t k = i * g.W + j;
      const bool edge_col = j == 0 || j + 1 == g.W, edge_row = i == 0 || i + 1 == g.H;
      m.interior[k] = (!edge_col && !edge_row) ? 1.0 : 0.0;
      m.dirichlet[k] = edge_col ? 1.0 : 0.0;
      m.neumann[k] = (edge_row && !edge_col) ? 1.0 : 0.0;
    }
  return m;
}

struct PhysicsTerms {
  Var total, div, cons, dir, neu;
};

/// Residual terms of the fields f for log-permeabilities ys [n, H*W]. Each
/// term is a sum of squares over its node set divided by H*W, averaged over
/// the batch. The divergence residual skips the boundary ring; flux
/// consistency covers every node, otherwise ring fluxes are unconstrained
/// and absorb the interior residual.
inline PhysicsTerms physics_terms(Tape &t, const SurrogateFields &f, const Tensor &ys,
                                  const Grid &g, double source, double beta) {
  const auto masks = physics_masks(g);
  Tensor k(ys.shape());
  for (std::size_t i = 0; i < ys.size(); ++i)
    k[i] = std::exp(ys[i]);
  Var K = t.constant(k);
  Var interior = t.constant(masks.interior);
  const double norm = 1.0 / (static_cast<double>(ys.rows()) * static_cast<double>(g.points()));

  Var du1 = d_ds1(f.u, g), du2 = d_ds2(f.u, g);
  Var div = add_scalar(d_ds1(f.tau1, g) + d_ds2(f.tau2, g), -source);
  Var c1 = f.tau1 + K * du1, c2 = f.tau2 + K * du2;

  PhysicsTerms r;
  r.div = scale(sum(mul_row(square(div), interior)), norm);
  r.cons = scale(sum(square(c1) + square(c2)), norm);
  r.dir = scale(sum(mul_row(square(f.u), t.constant(masks.dirichlet))), norm);
  r.neu = scale(sum(mul_row(square(K * du2), t.constant(masks.neumann))), norm);
  r.total = r.div + r.cons + scale(r.dir + r.neu, beta);
  return r;
}

inline ResidualBreakdown read_breakdown(const Tape &t, const PhysicsTerms &r, double beta) {
  ResidualBreakdown b;
  b.interior_flux_div = t.value(r.div).item();
  b.flux_consistency = t.value(r.cons).item();
  b.dirichlet = t.value(r.dir).item();
  b.neumann = t.value(r.neu).item();
  b.beta = beta;
  b.total = t.value(r.total).item();
  return b;
}

inline void check_physics_batch(const Tensor &ys, const Grid &g) {
  if (ys.rank() != 2 || ys.rows() == 0 || ys.cols() != g.points())
    throw ShapeError("physics batch must be [n, " + std::to_string(g.points()) + "], got " +
                     shape_string(ys.shape()));
}

/// Residual breakdown of given fields (each [n, H*W]) without a network.
inline ResidualBreakdown physics_residual(const Tensor &ys, const Tensor &u, const Tensor &tau1,
                                          const Tensor &tau2, const Grid &g, double source = 3.0,
                                          double beta = 100.0) {
  check_physics_batch(ys, g);
  Tape t;
  const SurrogateFields f{t.constant(u), t.constant(tau1), t.constant(tau2)};
  return read_breakdown(t, physics_terms(t, f, ys, g, source, beta), beta);
}

struct PhysicsEvaluation {
  double loss = 0.0;
  ResidualBreakdown breakdown;
  ParamStore gradients;
};

inline PhysicsEvaluation physics_loss(const Tensor &ys, const SurrogateParams &p,
                                      double source = 3.0, double beta = 100.0) {
  check_physics_batch(ys, p.grid);
  Tape t;
  BoundParams bp(t, p.params, true);
  const auto f = surrogate_forward(bp, p, t.constant(ys));
  const auto r = physics_terms(t, f, ys, p.grid, source, beta);
  PhysicsEvaluation ev;
  ev.breakdown = read_breakdown(t, r, beta);
  ev.loss = ev.breakdown.total;
  t.backward(r.total);
  ev.gradients = bp.gradients(t);
  return ev;
}

struct SurrogateTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 100;
  double learning_rate = 1e-3;
  double beta = 100.0;
  double source = 3.0;
  std::uint64_t seed = 0;
  // Learning rate decays geometrically to learning_rate * final_lr_factor
  // over the run; 1 keeps it constant.
  double final_lr_factor = 1.0;
};

struct SurrogateTrainingResult {
  SurrogateParams params;
  std::vector<double> loss_curve;
};

/// Mini-batch Adam on the physics loss over fixed consecutive batches;
/// final-epoch parameters are returned.
inline SurrogateTrainingResult train_surrogate(const Tensor &dataset, SurrogateParams init,
                                               const SurrogateTrainConfig &cfg) {
  if (dataset.rank() != 2 || dataset.rows() == 0)
    throw ValidationError("surrogate training needs a nonempty [n, H*W] dataset");
  if (cfg.batch_size == 0)
    throw ValidationError("batch size must be positive");
  SurrogateTrainingResult res{std::move(init), {}};
  AdamState state(cfg.learning_rate);
  const std::size_t n = dataset.rows();
  if (!(cfg.final_lr_factor > 0.0))
    throw ValidationError("final learning-rate factor must be positive");
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<ParamStore> checkpoint{res.params.params};
    if (cfg.epochs > 1)
      state.learning_rate =
          cfg.learning_rate * std::pow(cfg.final_lr_factor, static_cast<double>(epoch) /
                                                                static_cast<double>(cfg.epochs - 1));
    double acc = 0.0;
    try {
      for (std::size_t b = 0; b < n; b += cfg.batch_size) {
        const std::size_t e = std::min(n, b + cfg.batch_size);
        const auto ev =
            physics_loss(detail::row_block(dataset, b, e), res.params, cfg.source, cfg.beta);
        if (!std::isfinite(ev.loss))
          throw NumericalError("non-finite physics loss");
        acc += ev.loss * static_cast<double>(e - b);
        adam_step(res.params.params, ev.gradients, state);
      }
    } catch (const NumericalError &err) {
      throw TrainingDiverged(std::string("surrogate training diverged in epoch ") +
                                 std::to_string(epoch) + ": " + err.what(),
                             checkpoint, epoch);
    }
    res.loss_curve.push_back(acc / static_cast<double>(n));
  }
  return res;
}

/// ||a - b||_2 / ||b||_2.
inline double relative_l2(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("relative error of fields with different sizes");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0)
    throw ValidationError("relative error against an all-zero reference");
  return std::sqrt(num / den);
}

/// Mean relative L2 error of the surrogate pressure against the FD solver.
inline double surrogate_relative_error(const SurrogateParams &p, std::span<const Tensor> fields,
                                       double source = 3.0) {
  if (fields.empty())
    throw ValidationError("no test fields");
  double acc = 0.0;
  for (const auto &y : fields) {
    const Tensor u_hat = surrogate_forward(y, p).u;
    const auto ref = solve_darcy(y, p.grid, source);
    acc += relative_l2(u_hat.data(), ref.values.data());
  }
  return acc / static_cast<double>(fields.size());
}

} // namespace drkrnet
