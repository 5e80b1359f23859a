#pragma once

// Gaussian VAE used as a dimension-reduced prior: encoder q(x|y), decoder
// p(y|x), standard normal p(x), trained on the single-draw ELBO estimator.

#include "adam.hpp"
#include "grf.hpp"
#include "nn.hpp"

#include <limits>
#include <numeric>
#include <random>

namespace drkrnet {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// Raised when training produces a non-finite loss. Carries the last
/// parameters for which every step was finite.
class TrainingDiverged : public NumericalError {
public:
  TrainingDiverged(const std::string &what, std::vector<ParamStore> checkpoint,
                   std::size_t epoch)
      : NumericalError(what), last_finite(std::move(checkpoint)), epoch(epoch) {}
  std::vector<ParamStore> last_finite;
  std::size_t epoch;
};

struct VaeConfig {
  std::size_t latent_dim = 8;
  Grid grid;
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::vector<std::size_t> decoder_hidden{128, 256};
  double output_gain = 0.1; // scales the init range of both output layers
  std::uint64_t seed = 0;
};

struct VaeParams {
  ParamStore encoder;
  ParamStore decoder;
  std::size_t latent_dim = 0;
  Grid grid;
  std::vector<std::size_t> encoder_hidden;
  std::vector<std::size_t> decoder_hidden;

  std::size_t field_size() const { return grid.points(); }

  MlpShape encoder_shape() const {
    std::vector<std::size_t> w{field_size()};
    w.insert(w.end(), encoder_hidden.begin(), encoder_hidden.end());
    w.push_back(2 * latent_dim);
    return {w, Activation::relu};
  }

  MlpShape decoder_shape() const {
    std::vector<std::size_t> w{latent_dim};
    w.insert(w.end(), decoder_hidden.begin(), decoder_hidden.end());
    w.push_back(2 * field_size());
    return {w, Activation::relu};
  }
};

inline VaeParams init_vae(const VaeConfig &cfg) {
  if (cfg.latent_dim == 0)
    throw ValidationError("latent dimension must be positive");
  VaeParams p;
  p.latent_dim = cfg.latent_dim;
  p.grid = cfg.grid;
  p.encoder_hidden = cfg.encoder_hidden;
  p.decoder_hidden = cfg.decoder_hidden;
  p.encoder = ParamStore(cfg.seed);
  p.decoder = ParamStore(cfg.seed);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0));
  init_mlp(p.encoder, "encoder", p.encoder_shape(), rng, false, cfg.output_gain);
  init_mlp(p.decoder, "decoder", p.decoder_shape(), rng, false, cfg.output_gain);
  return p;
}

/// Data-dependent start for the decoder output layer: mean-head bias at the
/// per-pixel data mean, log-variance bias at the log per-pixel variance.
inline void initialize_decoder_output(VaeParams &p, const Tensor &dataset) {
  const std::size_t n = dataset.rows(), P = p.field_size();
  if (dataset.rank() != 2 || n == 0 || dataset.cols() != P)
    throw ValidationError("decoder initialization needs a nonempty [n, H*W] dataset");
  Tensor &b = p.decoder.at(bias_name("decoder", p.decoder_shape().layers() - 1));
  for (std::size_t k = 0; k < P; ++k) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      m += dataset.at(r, k);
    m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      v += (dataset.at(r, k) - m) * (dataset.at(r, k) - m);
    v /= static_cast<double>(n);
    b[k] = m;
    b[P + k] = std::clamp(std::log(std::max(v, 1e-300)), kLogVarMin, kLogVarMax);
  }
}

struct GaussianHeads {
  Var mean;
  Var logvar;
};

namespace detail {

inline std::vector<std::size_t> iota_index(std::size_t from, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), from);
  return idx;
}

inline GaussianHeads split_heads(Var out, std::size_t half) {
  return {gather_cols(out, iota_index(0, half)),
          clamp(gather_cols(out, iota_index(half, half)), kLogVarMin, kLogVarMax)};
}

} // namespace detail

/// Batch encoder: y [n, H*W] -> (mu_en, logvar_en), each [n, d].
inline GaussianHeads encode(const BoundParams &enc, const VaeParams &p, Var y) {
  return detail::split_heads(mlp_forward(enc, "encoder", p.encoder_shape(), y), p.latent_dim);
}

/// Batch decoder: x [n, d] -> (mu_de, logvar_de), each [n, H*W].
inline GaussianHeads decode(const BoundParams &dec, const VaeParams &p, Var x) {
  return detail::split_heads(mlp_forward(dec, "decoder", p.decoder_shape(), x), p.field_size());
}

/// x = mu + exp(logvar / 2) * eps.
inline Var reparameterize(Var mu, Var logvar, Var eps) {
  return mu + exp(scale(logvar, 0.5)) * eps;
}

inline Tensor reparameterize(const Tensor &mu, const Tensor &logvar, const Tensor &eps) {
  detail::same_shape(mu, logvar, "reparameterize");
  detail::same_shape(mu, eps, "reparameterize");
  Tensor x(mu.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    x[i] = mu[i] + std::exp(0.5 * logvar[i]) * eps[i];
  return x;
}

/// Single field y (H x W) -> (mu_en, logvar_en) as d-vectors.
inline std::pair<Tensor, Tensor> encode(const Tensor &y, const VaeParams &p) {
  Tape t;
  BoundParams enc(t, p.encoder, false);
  const auto h = encode(enc, p, t.constant(y.reshaped({1, p.field_size()})));
  return {t.value(h.mean).reshaped({p.latent_dim}), t.value(h.logvar).reshaped({p.latent_dim})};
}

/// Batch decode without gradients: x [n, d] -> ([n, H*W], [n, H*W]).
inline std::pair<Tensor, Tensor> decode_batch(const Tensor &x, const VaeParams &p) {
  Tape t;
  BoundParams dec(t, p.decoder, false);
  const auto h = decode(dec, p, t.constant(x));
  return {t.value(h.mean), t.value(h.logvar)};
}

/// Single latent x (d) -> (mu_de, logvar_de) as H x W fields.
inline std::pair<Tensor, Tensor> decode(const Tensor &x, const VaeParams &p) {
  auto [m, lv] = decode_batch(x.reshaped({1, p.latent_dim}), p);
  return {m.reshaped({p.grid.H, p.grid.W}), lv.reshaped({p.grid.H, p.grid.W})};
}

struct ElboBreakdown {
  double reconstruction_term = 0.0; // mean log p(y | x)
  double prior_term = 0.0;          // mean log p(x)
  double entropy_term = 0.0;        // mean -log q(x | y)
  double total = 0.0;
};

struct ElboTerms {
  Var loss; // -mean ELBO
  Var reconstruction;
  Var prior;
  Var entropy;
};

/// Single-draw ELBO estimator on a tape with explicit noise eps [n, d].
inline ElboTerms elbo_on_tape(Tape &t, const BoundParams &enc, const BoundParams &dec,
                              const VaeParams &p, const Tensor &batch, const Tensor &eps) {
  Var y = t.constant(batch);
  const auto q = encode(enc, p, y);
  Var x = reparameterize(q.mean, q.logvar, t.constant(eps));
  const auto g = decode(dec, p, x);
  Var rec = mean(gaussian_log_density(y, g.mean, g.logvar));
  Var prior = mean(standard_normal_log_density(x));
  Var ent = -mean(gaussian_log_density(x, q.mean, q.logvar));
  Var total = rec + prior + ent;
  return {-total, rec, prior, ent};
}

struct ElboEvaluation {
  double loss = 0.0;
  ElboBreakdown breakdown;
  ParamStore encoder_gradients;
  ParamStore decoder_gradients;
};

inline ElboEvaluation elbo_with_noise(const Tensor &batch, const VaeParams &p, const Tensor &eps) {
  if (batch.rank() != 2 || batch.rows() == 0 || batch.cols() != p.field_size())
    throw ShapeError("ELBO batch must be [n, " + std::to_string(p.field_size()) + "], got " +
                     shape_string(batch.shape()));
  Tape t;
  BoundParams enc(t, p.encoder, true), dec(t, p.decoder, true);
  const auto terms = elbo_on_tape(t, enc, dec, p, batch, eps);
  ElboEvaluation out;
  out.breakdown.reconstruction_term = t.value(terms.reconstruction).item();
  out.breakdown.prior_term = t.value(terms.prior).item();
  out.breakdown.entropy_term = t.value(terms.entropy).item();
  out.breakdown.total =
      out.breakdown.reconstruction_term + out.breakdown.prior_term + out.breakdown.entropy_term;
  out.loss = t.value(terms.loss).item();
  t.backward(terms.loss);
  out.encoder_gradients = enc.gradients(t);
  out.decoder_gradients = dec.gradients(t);
  return out;
}

/// -mean ELBO over the batch with eps drawn from rng.
inline ElboEvaluation elbo_batch(const Tensor &batch, const VaeParams &p, std::mt19937_64 &rng) {
  return elbo_with_noise(batch, p, standard_normal(batch.rows(), p.latent_dim, rng));
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 100;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct VaeTrainingResult {
  VaeParams params;
  std::vector<double> loss_curve; // mean -ELBO per epoch
};

namespace detail {

/// Row block [begin, end) of a matrix.
inline Tensor row_block(const Tensor &m, std::size_t begin, std::size_t end) {
  const auto c = m.cols();
  return Tensor::matrix(end - begin, c,
                        std::vector<double>(m.storage().begin() + begin * c,
                                            m.storage().begin() + end * c));
}

} // namespace detail

/// Mini-batch Adam on -ELBO. Batches are the fixed consecutive blocks of the
/// dataset (the last one may be partial); parameters of the final epoch are
/// returned.
inline VaeTrainingResult train_vae(const Tensor &dataset, VaeParams init, const TrainConfig &cfg) {
  if (dataset.rank() != 2 || dataset.rows() == 0)
    throw ValidationError("VAE training needs a nonempty [n, H*W] dataset");
  if (cfg.batch_size == 0)
    throw ValidationError("batch size must be positive");
  VaeTrainingResult res{std::move(init), {}};
  VaeParams &p = res.params;
  AdamState enc_state(cfg.learning_rate), dec_state(cfg.learning_rate);
  std::mt19937_64 noise(derive_seed(cfg.seed, 1));
  const std::size_t n = dataset.rows();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<ParamStore> checkpoint{p.encoder, p.decoder};
    double acc = 0.0;
    try {
      for (std::size_t b = 0; b < n; b += cfg.batch_size) {
        const std::size_t e = std::min(n, b + cfg.batch_size);
        const auto ev = elbo_batch(detail::row_block(dataset, b, e), p, noise);
        if (!std::isfinite(ev.loss))
          throw NumericalError("non-finite ELBO");
        acc += ev.loss * static_cast<double>(e - b);
        adam_step(p.encoder, ev.encoder_gradients, enc_state);
        adam_step(p.decoder, ev.decoder_gradients, dec_state);
      }
    } catch (const NumericalError &err) {
      throw TrainingDiverged(std::string("VAE training diverged in epoch ") +
                                 std::to_string(epoch) + ": " + err.what(),
                             checkpoint, epoch);
    }
    res.loss_curve.push_back(acc / static_cast<double>(n));
  }
  return res;
}

/// Fields mu_de(x) for x ~ N(0, I).
inline std::vector<FieldSample> sample_prior(const VaeParams &p, std::size_t n,
                                             std::mt19937_64 &rng) {
  std::vector<FieldSample> out;
  if (n == 0)
    return out;
  const Tensor x = standard_normal(n, p.latent_dim, rng);
  const Tensor mu = decode_batch(x, p).first;
  for (std::size_t r = 0; r < n; ++r)
    out.push_back(FieldSample{mu.row(r).reshaped({p.grid.H, p.grid.W}), 0.0, 0});
  return out;
}

} // namespace drkrnet
