#pragma once

// Central finite differences used as the independent oracle for every
// reverse-mode gradient in the test suites.

#include <drkrnet/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace drkrnet::testing {

/// d f / d params by central differences with step h, entry by entry.
inline ParamStore central_differences(const std::function<double(const ParamStore &)> &f,
                                      const ParamStore &params, double h = 1e-5) {
  ParamStore grads = params.zeros_like();
  ParamStore probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor &p = probe.begin()[k].second;
    Tensor &g = grads.begin()[k].second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      const double fp = f(probe);
      p[i] = orig - h;
      const double fm = f(probe);
      p[i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
  }
  return grads;
}

/// Same for a plain vector argument.
inline std::vector<double> central_differences(
    const std::function<double(const std::vector<double> &)> &f, std::vector<double> x,
    double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||) over flattened values; 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Largest per-tensor relative error between two stores with equal layout.
inline double max_relative_error(const ParamStore &a, const ParamStore &b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    worst = std::max(worst, relative_error(a.entries()[k].second.data(),
                                           b.entries()[k].second.data()));
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64 &rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> N(0.0, scale);
  for (auto &v : t.storage())
    v = N(rng);
  return t;
}

} // namespace drkrnet::testing
