#pragma once

// Experiment configuration: an INI file with one section per stage. Unknown
// sections or keys are rejected so a typo cannot silently fall back to a
// default.

#include "inference.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace drkrnet {

struct ExperimentConfig {
  // [grid]
  std::size_t H = 16, W = 16;
  // [data]
  double variance = 0.5;
  double mean_value = 1.0;
  std::vector<double> length_scales{0.2, 0.25, 0.3};
  std::size_t per_scale = 200;
  double energy_fraction = 0.95;
  std::uint64_t data_seed = 1;
  double truth_length_scale = 0.25;
  std::uint64_t truth_seed = 777;
  // [observation]
  std::size_t sensors_per_side = 8;
  double sensor_start = 0.0625;
  double sensor_step = 0.125;
  double noise_level = 0.05;
  double source = 3.0;
  std::uint64_t noise_seed = 5;
  // [vae]
  std::size_t latent_dim = 8;
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::vector<std::size_t> decoder_hidden{128, 256};
  double vae_output_gain = 0.1;
  std::size_t vae_epochs = 50;
  std::size_t vae_batch_size = 100;
  double vae_learning_rate = 1e-3;
  std::uint64_t vae_seed = 2;
  // [surrogate]
  std::vector<std::size_t> surrogate_hidden{512, 512};
  double surrogate_output_gain = 0.1;
  std::size_t surrogate_epochs = 50;
  std::size_t surrogate_batch_size = 100;
  double surrogate_learning_rate = 1e-3;
  double surrogate_final_lr_factor = 1.0;
  double beta = 100.0;
  std::size_t surrogate_test_per_scale = 10;
  std::uint64_t surrogate_seed = 4;
  // [flow]
  std::size_t n_groups = 4;
  std::size_t layers_per_stage = 8;
  std::size_t flow_hidden_width = 48;
  std::size_t flow_hidden_depth = 2;
  double scale_bound = 2.0;
  std::uint64_t flow_seed = 6;
  // [inference]
  std::size_t n_latent = 5000;
  std::size_t inference_epochs = 5;
  std::size_t inference_batch_size = 100;
  double inference_learning_rate = 0.01;
  std::size_t posterior_samples = 2000;
  DecoderMode decoder_mode = DecoderMode::mean;
  std::uint64_t inference_seed = 7;
  // [mcmc]
  std::size_t mcmc_steps = 10000;
  std::size_t mcmc_retained = 2000;
  double mcmc_initial_step = 0.5;
  std::size_t mcmc_pilot_steps = 500;
  double target_acceptance_low = 0.20;
  double target_acceptance_high = 0.35;
  std::uint64_t mcmc_seed = 8;

  Grid grid() const { return Grid(H, W); }
  void validate() const;
};

namespace detail {

template <class T> std::string format_value(const T &v) {
  if constexpr (std::is_same_v<T, double>) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else if constexpr (std::is_same_v<T, DecoderMode>) {
    return v == DecoderMode::mean ? "mean" : "sampled";
  } else if constexpr (std::is_same_v<T, std::vector<double>> ||
                       std::is_same_v<T, std::vector<std::size_t>>) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += (i ? "," : "") + format_value(v[i]);
    return s;
  } else {
    return std::to_string(v);
  }
}

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class T> T parse_value(const std::string &key, const std::string &raw) {
  const std::string text = trim(raw);
  auto fail = [&]() -> T {
    throw ValidationError("config key '" + key + "': cannot parse '" + text + "'");
  };
  if constexpr (std::is_same_v<T, DecoderMode>) {
    if (text == "mean")
      return DecoderMode::mean;
    if (text == "sampled")
      return DecoderMode::sampled;
    return fail();
  } else if constexpr (std::is_same_v<T, std::vector<double>> ||
                       std::is_same_v<T, std::vector<std::size_t>>) {
    T out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
      out.push_back(parse_value<typename T::value_type>(key, item));
    if (out.empty())
      return fail();
    return out;
  } else {
    std::size_t used = 0;
    T v{};
    try {
      if constexpr (std::is_same_v<T, double>)
        v = std::stod(text, &used);
      else {
        if (!text.empty() && text.front() == '-')
          return fail();
        v = static_cast<T>(std::stoull(text, &used));
      }
    } catch (const std::exception &) {
      return fail();
    }
    if (used != text.size())
      return fail();
    return v;
  }
}

/// Visits every (section, key, member) triple; the single source of truth for
/// parsing, writing and hashing.
template <class Config, class F> void visit_fields(Config &c, F &&f) {
  f("grid", "H", c.H);
  f("grid", "W", c.W);
  f("data", "variance", c.variance);
  f("data", "mean", c.mean_value);
  f("data", "length_scales", c.length_scales);
  f("data", "per_scale", c.per_scale);
  f("data", "energy_fraction", c.energy_fraction);
  f("data", "seed", c.data_seed);
  f("data", "truth_length_scale", c.truth_length_scale);
  f("data", "truth_seed", c.truth_seed);
  f("observation", "sensors_per_side", c.sensors_per_side);
  f("observation", "sensor_start", c.sensor_start);
  f("observation", "sensor_step", c.sensor_step);
  f("observation", "noise_level", c.noise_level);
  f("observation", "source", c.source);
  f("observation", "seed", c.noise_seed);
  f("vae", "latent_dim", c.latent_dim);
  f("vae", "encoder_hidden", c.encoder_hidden);
  f("vae", "decoder_hidden", c.decoder_hidden);
  f("vae", "output_gain", c.vae_output_gain);
  f("vae", "epochs", c.vae_epochs);
  f("vae", "batch_size", c.vae_batch_size);
  f("vae", "learning_rate", c.vae_learning_rate);
  f("vae", "seed", c.vae_seed);
  f("surrogate", "hidden", c.surrogate_hidden);
  f("surrogate", "output_gain", c.surrogate_output_gain);
  f("surrogate", "epochs", c.surrogate_epochs);
  f("surrogate", "batch_size", c.surrogate_batch_size);
  f("surrogate", "learning_rate", c.surrogate_learning_rate);
  f("surrogate", "final_lr_factor", c.surrogate_final_lr_factor);
  f("surrogate", "beta", c.beta);
  f("surrogate", "test_per_scale", c.surrogate_test_per_scale);
  f("surrogate", "seed", c.surrogate_seed);
  f("flow", "n_groups", c.n_groups);
  f("flow", "layers_per_stage", c.layers_per_stage);
  f("flow", "hidden_width", c.flow_hidden_width);
  f("flow", "hidden_depth", c.flow_hidden_depth);
  f("flow", "scale_bound", c.scale_bound);
  f("flow", "seed", c.flow_seed);
  f("inference", "n_latent", c.n_latent);
  f("inference", "epochs", c.inference_epochs);
  f("inference", "batch_size", c.inference_batch_size);
  f("inference", "learning_rate", c.inference_learning_rate);
  f("inference", "posterior_samples", c.posterior_samples);
  f("inference", "decoder_mode", c.decoder_mode);
  f("inference", "seed", c.inference_seed);
  f("mcmc", "steps", c.mcmc_steps);
  f("mcmc", "retained", c.mcmc_retained);
  f("mcmc", "initial_step", c.mcmc_initial_step);
  f("mcmc", "pilot_steps", c.mcmc_pilot_steps);
  f("mcmc", "target_low", c.target_acceptance_low);
  f("mcmc", "target_high", c.target_acceptance_high);
  f("mcmc", "seed", c.mcmc_seed);
}

} // namespace detail

inline void ExperimentConfig::validate() const {
  (void)grid();
  auto positive = [](bool ok, const std::string &what) {
    if (!ok)
      throw ValidationError(what);
  };
  positive(variance > 0.0, "data.variance must be positive");
  for (double l : length_scales)
    positive(l > 0.0, "data.length_scales must be positive");
  positive(per_scale > 0, "data.per_scale must be positive");
  positive(energy_fraction > 0.0 && energy_fraction <= 1.0, "data.energy_fraction must be in (0, 1]");
  positive(std::find(length_scales.begin(), length_scales.end(), truth_length_scale) !=
               length_scales.end(),
           "data.truth_length_scale must be one of data.length_scales");
  positive(sensors_per_side > 0, "observation.sensors_per_side must be positive");
  positive(noise_level > 0.0, "observation.noise_level must be positive");
  positive(latent_dim > 0, "vae.latent_dim must be positive");
  positive(vae_batch_size > 0 && surrogate_batch_size > 0 && inference_batch_size > 0,
           "batch sizes must be positive");
  positive(surrogate_final_lr_factor > 0.0, "surrogate.final_lr_factor must be positive");
  positive(surrogate_test_per_scale > 0, "surrogate.test_per_scale must be positive");
  positive(n_latent > 0 && posterior_samples > 0, "inference sample counts must be positive");
  positive(mcmc_steps >= mcmc_retained, "mcmc.steps must be at least mcmc.retained");
  positive(mcmc_initial_step > 0.0 && mcmc_initial_step <= 1.0, "mcmc.initial_step must be in (0, 1]");
  positive(target_acceptance_low < target_acceptance_high, "mcmc target band is empty");
  FlowConfig fc{latent_dim, n_groups, layers_per_stage, flow_hidden_width, flow_hidden_depth,
                scale_bound, flow_seed};
  fc.validate();
  ObservationOperator op = sensor_lattice(sensors_per_side, sensor_start, sensor_step);
  (void)op;
}

inline ExperimentConfig parse_config(const std::string &text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error &e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  std::map<std::string, std::set<std::string>> known;
  detail::visit_fields(cfg, [&](const char *sec, const char *key, auto &) { known[sec].insert(key); });
  for (const auto &[sec, node] : tree) {
    if (!known.contains(sec))
      throw ValidationError("config: unknown section [" + sec + "]");
    if (node.empty() && !node.data().empty())
      throw ValidationError("config: key '" + sec + "' outside any section");
    for (const auto &[key, value] : node)
      if (!known[sec].contains(key))
        throw ValidationError("config: unknown key '" + key + "' in [" + sec + "]");
  }
  detail::visit_fields(cfg, [&](const char *sec, const char *key, auto &member) {
    const auto v = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(
        std::string(sec) + "." + key, '.'));
    if (v)
      member = detail::parse_value<std::decay_t<decltype(member)>>(std::string(sec) + "." + key, *v);
  });
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string &path) {
  std::string text;
  try {
    text = read_bytes(path);
  } catch (const std::exception &) {
    throw ValidationError("cannot read config file '" + path + "'");
  }
  return parse_config(text);
}

/// Canonical INI text with every key, in a fixed order.
inline std::string format_config(const ExperimentConfig &cfg) {
  std::string out, section;
  detail::visit_fields(const_cast<ExperimentConfig &>(cfg),
                       [&](const char *sec, const char *key, const auto &member) {
                         if (section != sec) {
                           out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
                           section = sec;
                         }
                         out += std::string(key) + " = " + detail::format_value(member) + "\n";
                       });
  return out;
}

/// FNV-1a of the canonical text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig &cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : format_config(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Replaces every stage seed by one derived from a single override value.
inline ExperimentConfig with_seed_override(ExperimentConfig cfg, std::uint64_t seed) {
  std::uint64_t *seeds[] = {&cfg.data_seed, &cfg.truth_seed,     &cfg.noise_seed,
                            &cfg.vae_seed,  &cfg.surrogate_seed, &cfg.flow_seed,
                            &cfg.inference_seed, &cfg.mcmc_seed};
  for (std::size_t i = 0; i < std::size(seeds); ++i)
    *seeds[i] = derive_seed(seed, i);
  return cfg;
}

} // namespace drkrnet
