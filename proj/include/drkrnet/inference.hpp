#pragma once

// Latent-space posterior approximation: the reverse-KL flow objective, its
// training loop, posterior moments, the pCN baseline and the error metric.

#include "krnet.hpp"
#include "surrogate.hpp"
#include "vae.hpp"

#include <chrono>
#include <functional>

namespace drkrnet {

enum class DecoderMode { mean, sampled };

/// Gaussian sensor likelihood of a pressure row, precomputed for the tape.
struct LikelihoodModel {
  Tensor obs_matrix; // [H*W, m]
  Tensor values;     // [m]
  Tensor inv_var;    // [m]
  double log_norm = 0.0;
};

inline LikelihoodModel make_likelihood(const ObservationSet &obs, const Grid &g) {
  const std::size_t m = obs.values.size();
  if (m == 0 || obs.op.size() != m || obs.noise.per_sensor_std.size() != m)
    throw ValidationError("observation set is empty or inconsistent");
  LikelihoodModel lm{observation_matrix(obs.op, g), Tensor(Shape{m}), Tensor(Shape{m}), 0.0};
  for (std::size_t i = 0; i < m; ++i) {
    const double s = obs.noise.per_sensor_std[i];
    if (!(s > 0.0))
      throw ValidationError("non-positive noise scale at sensor " + std::to_string(i));
    lm.values[i] = obs.values[i];
    lm.inv_var[i] = 1.0 / (s * s);
    lm.log_norm -= std::log(s) + 0.5 * kLog2Pi;
  }
  return lm;
}

/// Row-wise log-likelihood of pressure rows u [n, H*W] -> [n].
inline Var log_likelihood(const LikelihoodModel &lm, Var u) {
  Tape &t = *u.tape;
  Tensor neg = lm.values;
  for (auto &v : neg.storage())
    v = -v;
  Var r = add_row(matmul(u, t.constant(lm.obs_matrix)), t.constant(neg));
  return add_scalar(scale(row_sum(mul_row(square(r), t.constant(lm.inv_var))), -0.5),
                    lm.log_norm);
}

/// Frozen decoder and surrogate plus the data being conditioned on.
struct InferenceProblem {
  VaeParams decoder;
  SurrogateParams surrogate;
  LikelihoodModel likelihood;
  DecoderMode mode = DecoderMode::mean;
  bool include_likelihood = true; // false gives a flat likelihood

  InferenceProblem(VaeParams dec, SurrogateParams sur, const ObservationSet &obs,
                   DecoderMode m = DecoderMode::mean)
      : decoder(std::move(dec)), surrogate(std::move(sur)),
        likelihood(make_likelihood(obs, surrogate.grid)), mode(m) {
    if (!(decoder.grid == surrogate.grid))
      throw ValidationError("decoder and surrogate grids differ");
  }

  std::size_t latent_dim() const { return decoder.latent_dim; }
};

struct KrnetLossBreakdown {
  double flow_entropy_term = 0.0;
  double neg_log_likelihood_term = 0.0;
  double neg_log_prior_term = 0.0;
  double total = 0.0;
};

struct DrKrnetEvaluation {
  double loss = 0.0;
  KrnetLossBreakdown breakdown;
  ParamStore gradients;
};

/// Monte Carlo reverse-KL objective on z [I, d]. zeta [I, H*W] is the decoder
/// noise for the sampled mode and is ignored in mean mode.
inline DrKrnetEvaluation drknet_loss(const Tensor &z, const FlowParams &flow,
                                     const InferenceProblem &prob, const Tensor &zeta = {}) {
  const std::size_t d = prob.latent_dim();
  if (z.rank() != 2 || z.rows() == 0 || z.cols() != d)
    throw ShapeError("latent batch must be [n, " + std::to_string(d) + "], got " +
                     shape_string(z.shape()));
  if (flow.config.dim != d)
    throw ValidationError("flow dimension does not match the decoder latent dimension");
  const bool sampled = prob.mode == DecoderMode::sampled;
  if (sampled && zeta.shape() != Shape{z.rows(), prob.decoder.field_size()})
    throw ShapeError("decoder noise must be [n, H*W] in sampled mode");

  Tape t;
  BoundParams fbp(t, flow.params, true);
  BoundParams dbp(t, prob.decoder.decoder, false);
  BoundParams sbp(t, prob.surrogate.params, false);

  Var zv = t.constant(z);
  const auto inv = flow_inverse(fbp, flow, zv);
  Var log_q = standard_normal_log_density(zv) + inv.logdet;
  Var log_prior = standard_normal_log_density(inv.out);

  const auto heads = decode(dbp, prob.decoder, inv.out);
  Var y = sampled ? reparameterize(heads.mean, heads.logvar, t.constant(zeta)) : heads.mean;
  Var ll = prob.include_likelihood
               ? log_likelihood(prob.likelihood, surrogate_forward(sbp, prob.surrogate, y).u)
               : t.constant(Tensor(Shape{z.rows()}));

  Var entropy = mean(log_q), nll = scale(mean(ll), -1.0), nlp = scale(mean(log_prior), -1.0);
  Var total = entropy + nll + nlp;

  DrKrnetEvaluation ev;
  ev.breakdown = {t.value(entropy).item(), t.value(nll).item(), t.value(nlp).item(),
                  t.value(total).item()};
  ev.loss = ev.breakdown.total;
  if (!std::isfinite(ev.loss))
    throw NumericalError("non-finite flow objective (entropy " +
                         std::to_string(ev.breakdown.flow_entropy_term) + ", nll " +
                         std::to_string(ev.breakdown.neg_log_likelihood_term) + ", prior " +
                         std::to_string(ev.breakdown.neg_log_prior_term) + ")");
  t.backward(total);
  ev.gradients = fbp.gradients(t);
  return ev;
}

struct DrKrnetTrainConfig {
  std::size_t n_latent = 5000; // I
  std::size_t epochs = 5;
  std::size_t batch_size = 100;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
};

struct DrKrnetTrainingResult {
  FlowParams flow;
  std::vector<double> loss_curve; // mean loss per epoch
};

/// Fixed latent set Z, mini-batch Adam over consecutive batches, last-epoch
/// parameters returned.
inline DrKrnetTrainingResult train_drknet(const FlowConfig &flow_cfg, const InferenceProblem &prob,
                                          const DrKrnetTrainConfig &cfg) {
  if (cfg.batch_size == 0 || cfg.n_latent == 0)
    throw ValidationError("latent set size and batch size must be positive");
  if (flow_cfg.dim != prob.latent_dim())
    throw ValidationError("flow dimension does not match the decoder latent dimension");
  DrKrnetTrainingResult res{init_flow(flow_cfg), {}};
  std::mt19937_64 zrng(derive_seed(cfg.seed, 0)), noise(derive_seed(cfg.seed, 1));
  const Tensor Z = standard_normal(cfg.n_latent, flow_cfg.dim, zrng);
  AdamState state(cfg.learning_rate);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<ParamStore> checkpoint{res.flow.params};
    double acc = 0.0;
    try {
      for (std::size_t b = 0; b < cfg.n_latent; b += cfg.batch_size) {
        const std::size_t e = std::min(cfg.n_latent, b + cfg.batch_size);
        Tensor zeta;
        if (prob.mode == DecoderMode::sampled)
          zeta = standard_normal(e - b, prob.decoder.field_size(), noise);
        const auto ev = drknet_loss(detail::row_block(Z, b, e), res.flow, prob, zeta);
        acc += ev.loss * static_cast<double>(e - b);
        adam_step(res.flow.params, ev.gradients, state);
      }
    } catch (const NumericalError &err) {
      throw TrainingDiverged("flow training diverged in epoch " + std::to_string(epoch) + ": " +
                                 err.what(),
                             checkpoint, epoch);
    }
    res.loss_curve.push_back(acc / static_cast<double>(cfg.n_latent));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Posterior summaries
// ---------------------------------------------------------------------------

struct PosteriorSummary {
  Tensor mean_field;     // H x W
  Tensor variance_field; // H x W
  double relative_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_samples = 0;
  double wall_time = 0.0;
};

/// ||mean - exact|| / ||exact|| over flattened fields.
inline double relative_error(const Tensor &mean_field, const Tensor &exact) {
  if (mean_field.shape() != exact.shape())
    throw ShapeError("relative error: shapes " + shape_string(mean_field.shape()) + " and " +
                     shape_string(exact.shape()) + " differ");
  return relative_l2(mean_field.data(), exact.data());
}

/// Field moments from decoded latents x [n, d]. The default averages the
/// decoder means and decoder variances; with total_variance the spread of
/// the means across samples is added.
inline PosteriorSummary latent_moments(const Tensor &x, const VaeParams &dec,
                                       bool total_variance = false) {
  if (x.rank() != 2 || x.rows() == 0 || x.cols() != dec.latent_dim)
    throw ShapeError("latent samples must be [n, " + std::to_string(dec.latent_dim) + "], got " +
                     shape_string(x.shape()));
  const auto [mu, logvar] = decode_batch(x, dec);
  const std::size_t n = x.rows(), P = dec.field_size();
  Tensor m(Shape{P}), v(Shape{P}), m2(Shape{P});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < P; ++k) {
      const double a = mu[r * P + k];
      m[k] += a;
      m2[k] += a * a;
      v[k] += std::exp(logvar[r * P + k]);
    }
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < P; ++k) {
    m[k] *= inv;
    v[k] *= inv;
    if (total_variance)
      v[k] += std::max(0.0, m2[k] * inv - m[k] * m[k]);
  }
  PosteriorSummary s;
  s.mean_field = m.reshaped({dec.grid.H, dec.grid.W});
  s.variance_field = v.reshaped({dec.grid.H, dec.grid.W});
  s.n_samples = n;
  return s;
}

/// Mean and variance fields from N_s flow samples pushed through the decoder.
inline PosteriorSummary posterior_moments(const FlowParams &flow, const VaeParams &dec,
                                          std::size_t n_samples, std::mt19937_64 &rng,
                                          bool total_variance = false) {
  if (n_samples == 0)
    throw ValidationError("posterior moments need at least one sample");
  if (flow.config.dim != dec.latent_dim)
    throw ValidationError("flow dimension does not match the decoder latent dimension");
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor z = standard_normal(n_samples, dec.latent_dim, rng);
  auto s = latent_moments(krnet_inverse(z, flow).first, dec, total_variance);
  s.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

// ---------------------------------------------------------------------------
// pCN-MCMC
// ---------------------------------------------------------------------------

using LatentLogLikelihood = std::function<double(std::span<const double>)>;

struct McmcChain {
  std::vector<std::vector<double>> states; // every state after each step
  std::vector<double> log_likelihoods;
  std::size_t accepted_count = 0;
  double step_size = 0.0;
  std::size_t burn_keep = 0;

  double acceptance_rate() const {
    return states.empty() ? 0.0
                          : static_cast<double>(accepted_count) / static_cast<double>(states.size());
  }

  /// The last burn_keep states as an [n, d] matrix.
  Tensor retained() const {
    const std::size_t n = std::min(burn_keep, states.size());
    const std::size_t d = states.empty() ? 0 : states.front().size();
    Tensor out(Shape{n, d});
    const std::size_t first = states.size() - n;
    for (std::size_t r = 0; r < n; ++r)
      std::copy(states[first + r].begin(), states[first + r].end(), out.storage().begin() + r * d);
    return out;
  }
};

/// pCN chain under a N(0, I) prior, started from `start` or, when that is
/// empty, from a prior draw.
inline McmcChain pcn_mcmc(const LatentLogLikelihood &log_like, std::size_t d, std::size_t steps,
                          double step_size, std::uint64_t seed, std::size_t burn_keep,
                          std::span<const double> start = {}) {
  if (!(step_size > 0.0 && step_size <= 1.0))
    throw ValidationError("pCN step size must lie in (0, 1]");
  if (d == 0 || steps < burn_keep)
    throw ValidationError("pCN needs d > 0 and steps >= burn_keep");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);

  if (!start.empty() && start.size() != d)
    throw ShapeError("pCN start state has " + std::to_string(start.size()) + " entries, expected " +
                     std::to_string(d));
  std::vector<double> x(d), prop(d);
  if (start.empty())
    for (auto &v : x)
      v = N(rng);
  else
    std::copy(start.begin(), start.end(), x.begin());
  double ll = log_like(x);
  if (!std::isfinite(ll))
    throw NumericalError("non-finite log-likelihood at the initial pCN state");

  McmcChain chain;
  chain.step_size = step_size;
  chain.burn_keep = burn_keep;
  chain.states.reserve(steps);
  chain.log_likelihoods.reserve(steps);
  const double keep = std::sqrt(1.0 - step_size * step_size);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < d; ++i)
      prop[i] = keep * x[i] + step_size * N(rng);
    const double llp = log_like(prop);
    const double u = U(rng);
    if (std::isfinite(llp) && std::log(u) < llp - ll) {
      x.swap(prop);
      ll = llp;
      ++chain.accepted_count;
    }
    chain.states.push_back(x);
    chain.log_likelihoods.push_back(ll);
  }
  return chain;
}

struct StepTuning {
  double step_size = 0.0;
  double acceptance_rate = 0.0;
  std::size_t rounds = 0;
  std::vector<double> last_state; // final state of the last pilot chain
};

/// Doubling/halving on short pilot chains until the acceptance rate lands in
/// [low, high]; once bracketed the step moves to the geometric midpoint. Each
/// pilot continues from where the previous one stopped, so later rounds see
/// the posterior rather than the prior.
inline StepTuning tune_pcn_step(const LatentLogLikelihood &log_like, std::size_t d,
                                double initial_step, std::uint64_t seed,
                                std::size_t pilot_steps = 500, double low = 0.20,
                                double high = 0.35, std::size_t max_rounds = 20) {
  double step = std::clamp(initial_step, 1e-6, 1.0);
  double lo = 0.0, hi = 0.0; // steps known to be too small / too large
  StepTuning out;
  for (std::size_t r = 0; r < max_rounds; ++r) {
    const auto chain =
        pcn_mcmc(log_like, d, pilot_steps, step, derive_seed(seed, r), 0, out.last_state);
    out = {step, chain.acceptance_rate(), r + 1,
           chain.states.empty() ? out.last_state : chain.states.back()};
    if (out.acceptance_rate >= low && out.acceptance_rate <= high)
      return out;
    if (out.acceptance_rate > high) {
      if (step >= 1.0)
        return out; // independence proposals already accepted often enough
      lo = step;
      step = hi > 0.0 ? std::sqrt(lo * hi) : std::min(1.0, 2.0 * step);
    } else {
      hi = step;
      step = lo > 0.0 ? std::sqrt(lo * hi) : 0.5 * step;
    }
  }
  return out;
}

/// Decoder-based log-likelihood of latent states, batch form [n, d] -> n values.
inline std::vector<double> latent_log_likelihoods(const InferenceProblem &prob, const Tensor &x) {
  Tape t;
  BoundParams dbp(t, prob.decoder.decoder, false);
  BoundParams sbp(t, prob.surrogate.params, false);
  Var y = decode(dbp, prob.decoder, t.constant(x)).mean;
  const Tensor ll = t.value(log_likelihood(prob.likelihood, surrogate_forward(sbp, prob.surrogate, y).u));
  return {ll.storage().begin(), ll.storage().end()};
}

inline LatentLogLikelihood latent_log_likelihood(const InferenceProblem &prob) {
  return [&prob](std::span<const double> x) {
    Tensor row(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end()));
    return latent_log_likelihoods(prob, row).front();
  };
}

/// Field moments from the retained chain states.
inline PosteriorSummary chain_moments(const McmcChain &chain, const VaeParams &dec,
                                      bool total_variance = false) {
  const Tensor x = chain.retained();
  if (x.rows() == 0)
    throw ValidationError("chain retains no states");
  return latent_moments(x, dec, total_variance);
}

} // namespace drkrnet
