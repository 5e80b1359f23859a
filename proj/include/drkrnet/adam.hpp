#pragma once

#include "tensor.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace drkrnet {

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;

  explicit AdamState(double lr = 1e-3, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : beta1(b1), beta2(b2), epsilon(eps), learning_rate(lr) {}

  bool initialized() const { return !first_moment.empty(); }
};

/// One bias-corrected Adam update, in place. Moments are created lazily on the
/// first call so a fresh state can be reused with any store.
inline void adam_step(ParamStore &params, const ParamStore &gradients, AdamState &state) {
  if (gradients.size() != params.size())
    throw ShapeError("adam_step: " + std::to_string(gradients.size()) +
                     " gradients for " + std::to_string(params.size()) + " parameters");
  std::size_t k = 0;
  for (const auto &[name, p] : params) {
    const auto &[gname, g] = gradients.entries()[k++];
    if (gname != name || g.shape() != p.shape())
      throw ShapeError("adam_step: gradient '" + gname + "' " + shape_string(g.shape()) +
                       " does not match parameter '" + name + "' " +
                       shape_string(p.shape()));
  }
  if (!state.initialized()) {
    for (const auto &[name, p] : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  } else if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " parameters, store has " +
                     std::to_string(params.size()));
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);

  k = 0;
  for (auto &[name, p] : params) {
    const Tensor &g = gradients.entries()[k].second;
    Tensor &m = state.first_moment[k];
    Tensor &v = state.second_moment[k];
    if (m.shape() != p.shape())
      throw ShapeError("adam_step: moment shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    ++k;
  }
}

} // namespace drkrnet
