#pragma once

// Experiment stages over one run directory:
//
//   <out>/data       prior dataset, truth field, pressure, noisy observations
//   <out>/vae        encoder/decoder checkpoints and loss curve
//   <out>/surrogate  surrogate checkpoint, loss curve, FD comparison
//   <out>/krnet      flow checkpoint, posterior fields, summary.json
//   <out>/mcmc       chain tail, posterior fields, summary.json
//
// Every manifest records the configuration hash; downstream stages refuse
// artifacts written under a different configuration. Wall times go to a
// separate timing.json so everything else is byte-reproducible.

#include "config.hpp"
#include "io.hpp"

#include <algorithm>
#include <chrono>

namespace drkrnet {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;
  fs::path stage(const char *name) const { return root / name; }
};

namespace detail {

class StageTimer {
public:
  StageTimer() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

private:
  std::chrono::steady_clock::time_point t0_;
};

inline void write_timing(const fs::path &dir, double seconds) {
  write_json(dir / "timing.json", Json{{"wall_time_seconds", seconds}});
}

inline fs::path prepare_stage(const RunPaths &run, const char *name) {
  const fs::path dir = run.stage(name);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw ValidationError("cannot create directory '" + dir.string() + "': " + ec.message());
  return dir;
}

/// Manifest of an upstream stage, checked for presence and configuration hash.
inline Json require_stage(const RunPaths &run, const char *name, const std::string &hash,
                          const char *needed_by) {
  const fs::path manifest = run.stage(name) / "manifest.json";
  if (!fs::exists(manifest))
    throw ValidationError(std::string(needed_by) + " needs the " + name + " stage; run it first (missing " +
                          manifest.string() + ")");
  Json j = read_json(manifest);
  const std::string found = j.value("config_hash", std::string{});
  if (found != hash)
    throw ValidationError("configuration hash mismatch: " + manifest.string() + " was written with " +
                          found + ", current configuration is " + hash);
  return j;
}

inline Json base_manifest(const ExperimentConfig &cfg, const char *stage) {
  return Json{{"stage", stage}, {"config_hash", config_hash(cfg)}};
}

/// Loaded checkpoint must match a freshly initialized one name for name.
inline void check_checkpoint(const ParamStore &loaded, const ParamStore &expected,
                             const std::string &what) {
  if (loaded.size() != expected.size())
    throw ShapeError(what + " checkpoint has " + std::to_string(loaded.size()) + " tensors, expected " +
                     std::to_string(expected.size()));
  for (const auto &[name, t] : expected.entries()) {
    if (!loaded.contains(name))
      throw ShapeError(what + " checkpoint lacks '" + name + "'");
    if (loaded.at(name).shape() != t.shape())
      throw ShapeError(what + " checkpoint tensor '" + name + "' has shape " +
                       shape_string(loaded.at(name).shape()) + ", expected " + shape_string(t.shape()));
  }
}

inline PriorDatasetSpec dataset_spec(const ExperimentConfig &cfg) {
  return PriorDatasetSpec{cfg.grid(),     cfg.variance,        cfg.mean_value, cfg.length_scales,
                          cfg.per_scale, cfg.energy_fraction, cfg.data_seed};
}

inline VaeConfig vae_config(const ExperimentConfig &cfg) {
  return VaeConfig{cfg.latent_dim, cfg.grid(), cfg.encoder_hidden, cfg.decoder_hidden,
                   cfg.vae_output_gain, cfg.vae_seed};
}

inline SurrogateConfig surrogate_config(const ExperimentConfig &cfg) {
  return SurrogateConfig{cfg.grid(), cfg.surrogate_hidden, cfg.surrogate_output_gain, cfg.surrogate_seed};
}

inline FlowConfig flow_config(const ExperimentConfig &cfg) {
  return FlowConfig{cfg.latent_dim,        cfg.n_groups,          cfg.layers_per_stage,
                    cfg.flow_hidden_width, cfg.flow_hidden_depth, cfg.scale_bound,
                    cfg.flow_seed};
}

/// Held-out fields for the surrogate-versus-solver comparison.
inline std::vector<Tensor> surrogate_test_fields(const ExperimentConfig &cfg) {
  PriorDatasetSpec spec = dataset_spec(cfg);
  spec.per_scale = cfg.surrogate_test_per_scale;
  spec.base_seed = derive_seed(cfg.data_seed, 1);
  std::vector<Tensor> out;
  for (auto &f : generate_prior_dataset(spec))
    out.push_back(std::move(f.values));
  return out;
}

/// Columns s1, s2, clean (noise-free), value (noisy), sigma.
inline std::string observations_csv(const ObservationSet &obs, std::span<const double> clean) {
  std::string out = "s1,s2,clean,value,sigma\n";
  for (std::size_t k = 0; k < obs.op.size(); ++k)
    out += format_double(obs.op.locations[k][0]) + "," + format_double(obs.op.locations[k][1]) + "," +
           format_double(clean[k]) + "," + format_double(obs.values[k]) + "," +
           format_double(obs.noise.per_sensor_std[k]) + "\n";
  return out;
}

inline void write_field(const fs::path &dir, const std::string &stem, const Tensor &f) {
  write_text(dir / (stem + ".csv"), field_csv(f));
  write_text(dir / (stem + ".pgm"), field_pgm(f));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Loading stage outputs
// ---------------------------------------------------------------------------

struct DataArtifacts {
  std::vector<FieldSample> samples;
  Tensor truth;    // H x W log-permeability
  Tensor pressure; // H x W FD pressure of the truth
  ObservationSet observations;
  std::vector<double> clean_observations;
};

inline DataArtifacts load_data(const RunPaths &run, const ExperimentConfig &cfg, const char *needed_by) {
  const Json manifest = detail::require_stage(run, "data", config_hash(cfg), needed_by);
  const fs::path dir = run.stage("data");
  DataArtifacts d;
  auto [grid, samples] = decode_dataset(read_bytes((dir / "dataset.bin").string()));
  if (grid != cfg.grid())
    throw ValidationError("dataset grid does not match the configuration");
  d.samples = std::move(samples);
  d.truth = parse_field_csv(read_bytes((dir / "truth.csv").string()));
  d.pressure = parse_field_csv(read_bytes((dir / "pressure.csv").string()));
  for (const auto &row : parse_csv_numbers(read_bytes((dir / "observations.csv").string()), true)) {
    if (row.size() != 5)
      throw ValidationError("observations.csv rows need five columns");
    d.observations.op.locations.push_back({row[0], row[1]});
    d.clean_observations.push_back(row[2]);
    d.observations.values.push_back(row[3]);
    d.observations.noise.per_sensor_std.push_back(row[4]);
  }
  d.observations.noise.level = manifest.at("noise_level").get<double>();
  d.observations.noise.floor = manifest.at("noise_floor").get<double>();
  d.observations.op.validate();
  return d;
}

inline VaeParams load_vae(const RunPaths &run, const ExperimentConfig &cfg, const char *needed_by) {
  detail::require_stage(run, "vae", config_hash(cfg), needed_by);
  VaeParams p = init_vae(detail::vae_config(cfg));
  const fs::path dir = run.stage("vae");
  ParamStore enc = load_params((dir / "encoder.krfl").string());
  ParamStore dec = load_params((dir / "decoder.krfl").string());
  detail::check_checkpoint(enc, p.encoder, "encoder");
  detail::check_checkpoint(dec, p.decoder, "decoder");
  p.encoder = std::move(enc);
  p.decoder = std::move(dec);
  return p;
}

inline SurrogateParams load_surrogate(const RunPaths &run, const ExperimentConfig &cfg,
                                      const char *needed_by) {
  detail::require_stage(run, "surrogate", config_hash(cfg), needed_by);
  SurrogateParams p = init_surrogate(detail::surrogate_config(cfg));
  ParamStore loaded = load_params((run.stage("surrogate") / "surrogate.krfl").string());
  detail::check_checkpoint(loaded, p.params, "surrogate");
  p.params = std::move(loaded);
  return p;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline Json cmd_generate_data(const ExperimentConfig &cfg, const RunPaths &run) {
  cfg.validate();
  detail::StageTimer timer;
  const fs::path dir = detail::prepare_stage(run, "data");
  const Grid g = cfg.grid();

  const auto samples = generate_prior_dataset(detail::dataset_spec(cfg));
  write_bytes((dir / "dataset.bin").string(), encode_dataset(g, samples));

  const CovarianceSpec cov{cfg.variance, cfg.truth_length_scale, cfg.truth_length_scale, cfg.mean_value};
  std::mt19937_64 truth_rng(cfg.truth_seed);
  const FieldSample truth = sample_field(build_kl_basis(g, cov, cfg.energy_fraction), cov, truth_rng);
  const PressureField pressure = solve_darcy(truth.values, g, cfg.source);

  const auto op = sensor_lattice(cfg.sensors_per_side, cfg.sensor_start, cfg.sensor_step);
  std::mt19937_64 noise_rng(cfg.noise_seed);
  const auto clean = observe(pressure, op);
  const ObservationSet obs = add_noise(op, clean, cfg.noise_level, noise_rng);

  detail::write_field(dir, "truth", truth.values);
  detail::write_field(dir, "pressure", pressure.values);
  write_text(dir / "observations.csv", detail::observations_csv(obs, clean));
  write_text(run.root / "config.ini", format_config(cfg));

  Json m = detail::base_manifest(cfg, "generate-data");
  m["grid"] = {g.H, g.W};
  m["n_samples"] = samples.size();
  m["length_scales"] = cfg.length_scales;
  m["per_scale"] = cfg.per_scale;
  m["truth_length_scale"] = cfg.truth_length_scale;
  m["n_sensors"] = op.size();
  m["noise_level"] = obs.noise.level;
  m["noise_floor"] = obs.noise.floor;
  detail::write_timing(dir, timer.seconds());
  write_json(dir / "manifest.json", m);
  return m;
}

inline Json cmd_train_vae(const ExperimentConfig &cfg, const RunPaths &run) {
  cfg.validate();
  const DataArtifacts data = load_data(run, cfg, "train-vae");
  detail::StageTimer timer;
  const fs::path dir = detail::prepare_stage(run, "vae");
  const Tensor X = fields_matrix(data.samples);
  VaeParams init = init_vae(detail::vae_config(cfg));
  initialize_decoder_output(init, X);
  const auto res = train_vae(
      X, std::move(init), TrainConfig{cfg.vae_epochs, cfg.vae_batch_size, cfg.vae_learning_rate, cfg.vae_seed});
  save_params(res.params.encoder, (dir / "encoder.krfl").string());
  save_params(res.params.decoder, (dir / "decoder.krfl").string());
  write_text(dir / "loss.csv", curve_csv(res.loss_curve));

  Json m = detail::base_manifest(cfg, "train-vae");
  m["latent_dim"] = cfg.latent_dim;
  m["epochs"] = cfg.vae_epochs;
  m["final_loss"] = res.loss_curve.empty() ? Json(nullptr) : Json(res.loss_curve.back());
  detail::write_timing(dir, timer.seconds());
  write_json(dir / "manifest.json", m);
  return m;
}

inline Json cmd_train_surrogate(const ExperimentConfig &cfg, const RunPaths &run) {
  cfg.validate();
  const DataArtifacts data = load_data(run, cfg, "train-surrogate");
  load_vae(run, cfg, "train-surrogate");
  detail::StageTimer timer;
  const fs::path dir = detail::prepare_stage(run, "surrogate");
  const auto res = train_surrogate(
      fields_matrix(data.samples), init_surrogate(detail::surrogate_config(cfg)),
      SurrogateTrainConfig{cfg.surrogate_epochs, cfg.surrogate_batch_size, cfg.surrogate_learning_rate,
                           cfg.beta, cfg.source, cfg.surrogate_seed, cfg.surrogate_final_lr_factor});
  save_params(res.params.params, (dir / "surrogate.krfl").string());
  write_text(dir / "loss.csv", curve_csv(res.loss_curve));

  const auto tests = detail::surrogate_test_fields(cfg);
  const Tensor u_truth = surrogate_forward(data.truth, res.params).u;
  Json m = detail::base_manifest(cfg, "train-surrogate");
  m["epochs"] = cfg.surrogate_epochs;
  m["final_loss"] = res.loss_curve.empty() ? Json(nullptr) : Json(res.loss_curve.back());
  m["n_test_fields"] = tests.size();
  m["test_relative_error"] = surrogate_relative_error(res.params, tests, cfg.source);
  m["truth_relative_error"] = relative_l2(u_truth.data(), data.pressure.data());
  detail::write_field(dir, "truth_pressure", u_truth);
  detail::write_timing(dir, timer.seconds());
  write_json(dir / "manifest.json", m);
  return m;
}

namespace detail {

struct InferenceInputs {
  DataArtifacts data;
  VaeParams vae;
  SurrogateParams surrogate;
};

inline InferenceInputs inference_inputs(const ExperimentConfig &cfg, const RunPaths &run,
                                        const char *needed_by) {
  return {load_data(run, cfg, needed_by), load_vae(run, cfg, needed_by),
          load_surrogate(run, cfg, needed_by)};
}

/// Error of the VAE prior mean field, estimated from prior latent draws.
inline double prior_mean_error(const ExperimentConfig &cfg, const VaeParams &vae, const Tensor &truth) {
  std::mt19937_64 rng(derive_seed(cfg.inference_seed, 2));
  const auto s = latent_moments(standard_normal(cfg.posterior_samples, cfg.latent_dim, rng), vae);
  return relative_error(s.mean_field, truth);
}

inline Json summary_json(const ExperimentConfig &cfg, const char *method, const PosteriorSummary &s,
                         double prior_error) {
  double vmin = s.variance_field.data().empty() ? 0.0 : s.variance_field.data()[0];
  for (double v : s.variance_field.data())
    vmin = std::min(vmin, v);
  return Json{{"method", method},
              {"config_hash", config_hash(cfg)},
              {"d", cfg.latent_dim},
              {"relative_error", s.relative_error},
              {"prior_mean_relative_error", prior_error},
              {"n_samples", s.n_samples},
              {"min_variance", vmin}};
}

} // namespace detail

inline Json cmd_infer_krnet(const ExperimentConfig &cfg, const RunPaths &run) {
  cfg.validate();
  const auto in = detail::inference_inputs(cfg, run, "infer-krnet");
  detail::StageTimer timer;
  const fs::path dir = detail::prepare_stage(run, "krnet");
  const InferenceProblem prob(in.vae, in.surrogate, in.data.observations, cfg.decoder_mode);
  const auto res = train_drknet(detail::flow_config(cfg), prob,
                                DrKrnetTrainConfig{cfg.n_latent, cfg.inference_epochs,
                                                   cfg.inference_batch_size, cfg.inference_learning_rate,
                                                   cfg.inference_seed});
  std::mt19937_64 rng(derive_seed(cfg.inference_seed, 3));
  PosteriorSummary s = posterior_moments(res.flow, in.vae, cfg.posterior_samples, rng);
  s.relative_error = relative_error(s.mean_field, in.data.truth);
  const double seconds = timer.seconds();

  save_params(res.flow.params, (dir / "flow.krfl").string());
  write_text(dir / "loss.csv", curve_csv(res.loss_curve));
  detail::write_field(dir, "mean", s.mean_field);
  detail::write_field(dir, "variance", s.variance_field);
  Json summary = detail::summary_json(cfg, "DR-KRnet", s, detail::prior_mean_error(cfg, in.vae, in.data.truth));
  summary["initial_loss"] = res.loss_curve.empty() ? Json(nullptr) : Json(res.loss_curve.front());
  summary["final_loss"] = res.loss_curve.empty() ? Json(nullptr) : Json(res.loss_curve.back());
  detail::write_timing(dir, seconds);
  write_json(dir / "summary.json", summary);
  write_json(dir / "manifest.json", detail::base_manifest(cfg, "infer-krnet"));
  return summary;
}

inline Json cmd_infer_mcmc(const ExperimentConfig &cfg, const RunPaths &run) {
  cfg.validate();
  const auto in = detail::inference_inputs(cfg, run, "infer-mcmc");
  detail::StageTimer timer;
  const fs::path dir = detail::prepare_stage(run, "mcmc");
  const InferenceProblem prob(in.vae, in.surrogate, in.data.observations, DecoderMode::mean);
  const auto ll = latent_log_likelihood(prob);
  const StepTuning tuned =
      tune_pcn_step(ll, cfg.latent_dim, cfg.mcmc_initial_step, derive_seed(cfg.mcmc_seed, 0),
                    cfg.mcmc_pilot_steps, cfg.target_acceptance_low, cfg.target_acceptance_high);
  const McmcChain chain = pcn_mcmc(ll, cfg.latent_dim, cfg.mcmc_steps, tuned.step_size,
                                   derive_seed(cfg.mcmc_seed, 1), cfg.mcmc_retained, tuned.last_state);
  PosteriorSummary s = chain_moments(chain, in.vae);
  s.relative_error = relative_error(s.mean_field, in.data.truth);
  const double seconds = timer.seconds();

  write_text(dir / "retained_states.csv", field_csv(chain.retained()));
  detail::write_field(dir, "mean", s.mean_field);
  detail::write_field(dir, "variance", s.variance_field);
  Json summary = detail::summary_json(cfg, "pCN-MCMC", s, detail::prior_mean_error(cfg, in.vae, in.data.truth));
  summary["acceptance_rate"] = chain.acceptance_rate();
  summary["accepted_count"] = chain.accepted_count;
  summary["steps"] = chain.states.size();
  summary["step_size"] = chain.step_size;
  summary["tuning_rounds"] = tuned.rounds;
  detail::write_timing(dir, seconds);
  write_json(dir / "summary.json", summary);
  write_json(dir / "manifest.json", detail::base_manifest(cfg, "infer-mcmc"));
  return summary;
}

struct ReportRow {
  std::string method;
  std::size_t d = 0;
  double relative_error = 0.0;
  double wall_time = 0.0;
  std::optional<double> acceptance_rate;
};

/// One row per inference summary found under the given run directories,
/// sorted by (method, d).
inline std::vector<ReportRow> collect_report(std::span<const fs::path> run_dirs) {
  std::vector<ReportRow> rows;
  for (const auto &root : run_dirs) {
    if (!fs::is_directory(root))
      throw ValidationError("run directory '" + root.string() + "' does not exist");
    for (const char *stage : {"krnet", "mcmc"}) {
      const fs::path dir = root / stage;
      if (!fs::exists(dir / "summary.json"))
        continue;
      const Json s = read_json(dir / "summary.json");
      ReportRow r;
      r.method = s.at("method").get<std::string>();
      r.d = s.at("d").get<std::size_t>();
      r.relative_error = s.at("relative_error").get<double>();
      r.wall_time = fs::exists(dir / "timing.json")
                        ? read_json(dir / "timing.json").at("wall_time_seconds").get<double>()
                        : std::numeric_limits<double>::quiet_NaN();
      if (s.contains("acceptance_rate"))
        r.acceptance_rate = s.at("acceptance_rate").get<double>();
      rows.push_back(std::move(r));
    }
  }
  if (rows.empty())
    throw ValidationError("report needs at least one completed inference run");
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow &a, const ReportRow &b) {
    return std::tie(a.method, a.d) < std::tie(b.method, b.d);
  });
  return rows;
}

inline std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = "method,d,relative_error,wall_time,acceptance_rate\n";
  for (const auto &r : rows)
    out += r.method + "," + std::to_string(r.d) + "," + format_double(r.relative_error) + "," +
           format_double(r.wall_time) + "," +
           (r.acceptance_rate ? format_double(*r.acceptance_rate) : std::string{}) + "\n";
  return out;
}

inline std::string cmd_report(std::span<const fs::path> run_dirs, const fs::path &out_dir) {
  const std::string csv = report_csv(collect_report(run_dirs));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec)
    throw ValidationError("cannot create directory '" + out_dir.string() + "'");
  write_text(out_dir / "report.csv", csv);
  return csv;
}

} // namespace drkrnet
