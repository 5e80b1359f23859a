#pragma once

// KRnet-style flow on R^d: K equal groups, K-1 stages of L affine coupling
// layers each. Stage t acts on the first d - t*(d/K) coordinates and then
// freezes the last group of that block.

#include "nn.hpp"

#include <numeric>
#include <random>

namespace drkrnet {

struct FlowConfig {
  std::size_t dim = 8;
  std::size_t n_groups = 4;
  std::size_t layers_per_stage = 8;
  std::size_t hidden_width = 48;
  std::size_t hidden_depth = 2;
  double scale_bound = 2.0;
  std::uint64_t seed = 0;

  std::size_t group_size() const { return dim / n_groups; }
  std::size_t stages() const { return n_groups - 1; }

  /// Active coordinate count during stage t.
  std::size_t active(std::size_t stage) const { return dim - stage * group_size(); }

  void validate() const {
    if (dim == 0 || n_groups == 0 || dim % n_groups != 0)
      throw ValidationError("flow groups must divide the dimension (d=" + std::to_string(dim) +
                            ", K=" + std::to_string(n_groups) + ")");
    if (n_groups < 2)
      throw ValidationError("flow needs at least two groups");
    if (layers_per_stage == 0 || hidden_width == 0)
      throw ValidationError("flow needs at least one layer and a positive hidden width");
    if (!(scale_bound > 0.0))
      throw ValidationError("scale bound must be positive");
  }

  bool operator==(const FlowConfig &) const = default;
};

struct CouplingSplit {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> transformed;
};

/// One coupling layer with all index sets precomputed against the full
/// d-vector.
struct LayerSpec {
  std::size_t stage = 0;
  std::size_t active = 0;
  CouplingSplit split;
  std::vector<std::size_t> unchanged; // complement of split.transformed in [0, d)
  std::vector<std::size_t> shift_cols;
  std::vector<std::size_t> scale_cols;
  std::string prefix;
};

inline CouplingSplit alternating_split(std::size_t active, std::size_t parity) {
  CouplingSplit s;
  for (std::size_t i = 0; i < active; ++i)
    (i % 2 == parity ? s.kept : s.transformed).push_back(i);
  return s;
}

inline std::vector<LayerSpec> flow_layers(const FlowConfig &cfg) {
  cfg.validate();
  std::vector<LayerSpec> out;
  std::size_t k = 0;
  for (std::size_t t = 0; t < cfg.stages(); ++t) {
    for (std::size_t l = 0; l < cfg.layers_per_stage; ++l, ++k) {
      LayerSpec s;
      s.stage = t;
      s.active = cfg.active(t);
      s.split = alternating_split(s.active, l % 2);
      std::vector<bool> moved(cfg.dim, false);
      for (auto i : s.split.transformed)
        moved[i] = true;
      for (std::size_t i = 0; i < cfg.dim; ++i)
        if (!moved[i])
          s.unchanged.push_back(i);
      const std::size_t m = s.split.transformed.size();
      s.scale_cols.resize(m);
      s.shift_cols.resize(m);
      std::iota(s.scale_cols.begin(), s.scale_cols.end(), 0);
      std::iota(s.shift_cols.begin(), s.shift_cols.end(), m);
      s.prefix = "layer" + std::to_string(k);
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline MlpShape coupling_shape(const FlowConfig &cfg, const CouplingSplit &split) {
  std::vector<std::size_t> w{split.kept.size()};
  for (std::size_t h = 0; h < cfg.hidden_depth; ++h)
    w.push_back(cfg.hidden_width);
  w.push_back(2 * split.transformed.size());
  return {w, Activation::relu};
}

struct FlowParams {
  FlowConfig config;
  ParamStore params;
  std::vector<LayerSpec> layers;

  /// Active dimension of each stage.
  std::vector<std::size_t> schedule() const {
    std::vector<std::size_t> s;
    for (std::size_t t = 0; t < config.stages(); ++t)
      s.push_back(config.active(t));
    return s;
  }
};

/// Coupling nets get uniform fan-in hidden weights and a zero final layer, so
/// a fresh flow is the identity.
inline FlowParams init_flow(const FlowConfig &cfg) {
  FlowParams f{cfg, ParamStore(cfg.seed), flow_layers(cfg)};
  std::mt19937_64 rng(cfg.seed);
  for (const auto &l : f.layers)
    init_mlp(f.params, l.prefix, coupling_shape(cfg, l.split), rng, true);
  return f;
}

/// Rebuild layer metadata around a loaded parameter store.
inline FlowParams flow_from_params(const FlowConfig &cfg, ParamStore params) {
  FlowParams f{cfg, std::move(params), flow_layers(cfg)};
  const std::size_t expected = f.layers.size() * 2 * (cfg.hidden_depth + 1);
  if (f.params.size() != expected)
    throw ShapeError("flow checkpoint has " + std::to_string(f.params.size()) +
                     " tensors, configuration expects " + std::to_string(expected));
  for (const auto &l : f.layers) {
    const auto shape = coupling_shape(cfg, l.split);
    for (std::size_t k = 0; k + 1 < shape.widths.size(); ++k) {
      const Shape want{shape.widths[k], shape.widths[k + 1]};
      if (f.params.at(weight_name(l.prefix, k)).shape() != want)
        throw ShapeError("flow parameter " + weight_name(l.prefix, k) + " has shape " +
                         shape_string(f.params.at(weight_name(l.prefix, k)).shape()) +
                         ", expected " + shape_string(want));
    }
  }
  return f;
}

struct FlowPass {
  Var out;
  Var logdet; // [n], log|det df/dx| of the forward map at the x side
};

namespace detail {

struct ScaleShift {
  Var s;
  Var t;
};

inline ScaleShift coupling_net(const BoundParams &bp, const FlowConfig &cfg, const LayerSpec &l,
                               Var x) {
  Var h = mlp_forward(bp, l.prefix, coupling_shape(cfg, l.split), gather_cols(x, l.split.kept));
  return {scale(tanh(gather_cols(h, l.scale_cols)), cfg.scale_bound),
          gather_cols(h, l.shift_cols)};
}

inline Var layer_forward(const BoundParams &bp, const FlowConfig &cfg, const LayerSpec &l, Var x,
                         Var &logdet, bool &have_logdet) {
  const auto st = coupling_net(bp, cfg, l, x);
  Var zt = gather_cols(x, l.split.transformed) * exp(st.s) + st.t;
  Var ld = row_sum(st.s);
  logdet = have_logdet ? logdet + ld : ld;
  have_logdet = true;
  return scatter_cols({{gather_cols(x, l.unchanged), l.unchanged}, {zt, l.split.transformed}},
                      cfg.dim);
}

inline Var layer_inverse(const BoundParams &bp, const FlowConfig &cfg, const LayerSpec &l, Var z,
                         Var &logdet, bool &have_logdet) {
  const auto st = coupling_net(bp, cfg, l, z);
  Var xt = (gather_cols(z, l.split.transformed) - st.t) * exp(-st.s);
  Var ld = row_sum(st.s);
  logdet = have_logdet ? logdet + ld : ld;
  have_logdet = true;
  return scatter_cols({{gather_cols(z, l.unchanged), l.unchanged}, {xt, l.split.transformed}},
                      cfg.dim);
}

inline void check_flow_input(const FlowParams &f, const Tensor &x) {
  if (x.rank() != 2 || x.cols() != f.config.dim)
    throw ShapeError("flow input " + shape_string(x.shape()) + " does not match dimension " +
                     std::to_string(f.config.dim));
}

inline Var zero_logdet(Tape &t, std::size_t n) { return t.constant(Tensor(Shape{n})); }

} // namespace detail

/// Stages [stage_begin, stage_end) of the forward map on a batch x [n, d].
inline FlowPass flow_forward(const BoundParams &bp, const FlowParams &f, Var x,
                             std::size_t stage_begin = 0,
                             std::size_t stage_end = std::numeric_limits<std::size_t>::max()) {
  Var ld{};
  bool have = false;
  for (const auto &l : f.layers)
    if (l.stage >= stage_begin && l.stage < stage_end)
      x = detail::layer_forward(bp, f.config, l, x, ld, have);
  if (!have)
    ld = detail::zero_logdet(*x.tape, x.tape->value(x).rows());
  return {x, ld};
}

/// Inverse map on a batch z [n, d]. The returned logdet is that of the
/// forward map evaluated at the returned x.
inline FlowPass flow_inverse(const BoundParams &bp, const FlowParams &f, Var z) {
  Var ld{};
  bool have = false;
  for (auto it = f.layers.rbegin(); it != f.layers.rend(); ++it)
    z = detail::layer_inverse(bp, f.config, *it, z, ld, have);
  if (!have)
    ld = detail::zero_logdet(*z.tape, z.tape->value(z).rows());
  return {z, ld};
}

/// log q(x) = log N(f(x); 0, I) + log|det df/dx|, row-wise [n].
inline Var flow_log_density(const BoundParams &bp, const FlowParams &f, Var x) {
  const auto p = flow_forward(bp, f, x);
  return standard_normal_log_density(p.out) + p.logdet;
}

// ---------------------------------------------------------------------------
// Plain-tensor entry points. Inputs are a d-vector or an [n, d] batch; the
// outputs keep the input's rank.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor as_batch(const Tensor &x, std::size_t d) {
  return x.rank() == 1 ? x.reshaped({1, d}) : x;
}

inline Tensor like_input(const Tensor &out, const Tensor &in) {
  return in.rank() == 1 ? out.reshaped({out.size()}) : out;
}

} // namespace detail

/// Single coupling layer on the active block of one point.
inline std::pair<Tensor, double> coupling_forward(const Tensor &x_active, const ParamStore &layer,
                                                  const std::string &prefix,
                                                  const CouplingSplit &split,
                                                  const FlowConfig &cfg) {
  LayerSpec l;
  l.active = x_active.size();
  l.split = split;
  l.prefix = prefix;
  std::vector<bool> moved(l.active, false);
  for (auto i : split.transformed)
    moved.at(i) = true;
  for (std::size_t i = 0; i < l.active; ++i)
    if (!moved[i])
      l.unchanged.push_back(i);
  const auto m = split.transformed.size();
  l.scale_cols.resize(m);
  l.shift_cols.resize(m);
  std::iota(l.scale_cols.begin(), l.scale_cols.end(), 0);
  std::iota(l.shift_cols.begin(), l.shift_cols.end(), m);
  FlowConfig local = cfg;
  local.dim = l.active;

  Tape t;
  BoundParams bp(t, layer, false);
  Var ld{};
  bool have = false;
  Var z = detail::layer_forward(bp, local, l, t.constant(x_active.reshaped({1, l.active})), ld,
                                have);
  return {t.value(z).reshaped({l.active}), t.value(ld)[0]};
}

inline std::pair<Tensor, Tensor> krnet_forward(const Tensor &x, const FlowParams &f,
                                               std::size_t stage_begin = 0,
                                               std::size_t stage_end =
                                                   std::numeric_limits<std::size_t>::max()) {
  const Tensor xb = detail::as_batch(x, f.config.dim);
  detail::check_flow_input(f, xb);
  Tape t;
  BoundParams bp(t, f.params, false);
  const auto p = flow_forward(bp, f, t.constant(xb), stage_begin, stage_end);
  return {detail::like_input(t.value(p.out), x), t.value(p.logdet)};
}

/// Returns x = f^{-1}(z) and the forward logdet at x.
inline std::pair<Tensor, Tensor> krnet_inverse(const Tensor &z, const FlowParams &f) {
  const Tensor zb = detail::as_batch(z, f.config.dim);
  detail::check_flow_input(f, zb);
  Tape t;
  BoundParams bp(t, f.params, false);
  const auto p = flow_inverse(bp, f, t.constant(zb));
  return {detail::like_input(t.value(p.out), z), t.value(p.logdet)};
}

/// Row-wise log q(x), shape [n].
inline Tensor log_density(const Tensor &x, const FlowParams &f) {
  const Tensor xb = detail::as_batch(x, f.config.dim);
  detail::check_flow_input(f, xb);
  if (!xb.all_finite())
    throw NumericalError("log_density of non-finite point");
  Tape t;
  BoundParams bp(t, f.params, false);
  return t.value(flow_log_density(bp, f, t.constant(xb)));
}

} // namespace drkrnet
