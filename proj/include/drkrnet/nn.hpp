#pragma once

// Fully connected networks on the tape, initialization, and the diagonal
// Gaussian log-density shared by the VAE, the flow and the likelihood.

#include "autodiff.hpp"

#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace drkrnet {

enum class Activation { relu, softplus, tanh };

inline Var activate(Var x, Activation a) {
  switch (a) {
  case Activation::relu:
    return relu(x);
  case Activation::softplus:
    return softplus(x);
  case Activation::tanh:
    return tanh(x);
  }
  return x;
}

/// Layer sizes including input and output, e.g. {in, 48, 48, out}.
struct MlpShape {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::relu;

  std::size_t layers() const { return widths.size() - 1; }
  std::size_t inputs() const { return widths.front(); }
  std::size_t outputs() const { return widths.back(); }
};

inline std::string weight_name(const std::string &prefix, std::size_t layer) {
  return prefix + "/W" + std::to_string(layer);
}
inline std::string bias_name(const std::string &prefix, std::size_t layer) {
  return prefix + "/b" + std::to_string(layer);
}

/// Uniform fan-in scaling U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
/// With zero_last the output layer starts at exactly zero.
inline void init_mlp(ParamStore &store, const std::string &prefix, const MlpShape &shape,
                     std::mt19937_64 &rng, bool zero_last = false, double last_gain = 1.0) {
  if (shape.widths.size() < 2)
    throw ValidationError("mlp '" + prefix + "' needs at least input and output widths");
  for (std::size_t l = 0; l < shape.layers(); ++l) {
    const auto fan_in = shape.widths[l], fan_out = shape.widths[l + 1];
    Tensor W(Shape{fan_in, fan_out});
    const bool last = l + 1 == shape.layers();
    if (!(last && zero_last)) {
      const double bound =
          std::sqrt(6.0 / static_cast<double>(fan_in)) * (last ? last_gain : 1.0);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto &w : W.storage())
        w = u(rng);
    }
    store.add(weight_name(prefix, l), std::move(W));
    store.add(bias_name(prefix, l), Tensor(Shape{fan_out}));
  }
}

/// Dense stack: activation after every layer except the last.
inline Var mlp_forward(const BoundParams &p, const std::string &prefix, const MlpShape &shape,
                       Var x) {
  for (std::size_t l = 0; l < shape.layers(); ++l) {
    x = add_row(matmul(x, p[weight_name(prefix, l)]), p[bias_name(prefix, l)]);
    if (l + 1 < shape.layers())
      x = activate(x, shape.hidden);
  }
  return x;
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Row-wise log N(x; mu, diag(exp(logvar))) for [n, d] inputs -> [n].
inline Var gaussian_log_density(Var x, Var mu, Var logvar) {
  const auto d = static_cast<double>(x.tape->value(x).cols());
  Var z2 = square(x - mu) * exp(-logvar);
  return add_scalar(scale(row_sum(z2 + logvar), -0.5), -0.5 * d * kLog2Pi);
}

/// Row-wise log N(x; 0, I) for [n, d] inputs -> [n].
inline Var standard_normal_log_density(Var x) {
  const auto d = static_cast<double>(x.tape->value(x).cols());
  return add_scalar(scale(row_sum(square(x)), -0.5), -0.5 * d * kLog2Pi);
}

/// n x d matrix of i.i.d. standard normal draws.
inline Tensor standard_normal(std::size_t n, std::size_t d, std::mt19937_64 &rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor out(Shape{n, d});
  for (auto &v : out.storage())
    v = N(rng);
  return out;
}

} // namespace drkrnet
