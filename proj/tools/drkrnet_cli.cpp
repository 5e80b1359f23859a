// drkrnet: run one experiment stage.
//
//   drkrnet generate-data   --config desk.ini --out runs/desk
//   drkrnet train-vae       --config desk.ini --out runs/desk
//   drkrnet train-surrogate --config desk.ini --out runs/desk
//   drkrnet infer-krnet     --config desk.ini --out runs/desk
//   drkrnet infer-mcmc      --config desk.ini --out runs/desk
//   drkrnet report runs/desk [more runs...] --out runs
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.

#include <drkrnet/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace drkrnet;
using StageFn = Json (*)(const ExperimentConfig &, const RunPaths &);

struct StageOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed_override;
};

void add_stage(CLI::App &app, const char *name, const char *help, StageFn fn,
               std::function<void()> &action) {
  auto opts = std::make_shared<StageOptions>();
  CLI::App *sub = app.add_subcommand(name, help);
  sub->add_option("--config", opts->config, "experiment configuration (INI)")->required();
  sub->add_option("--out", opts->out, "run directory")->required();
  sub->add_option("--seed-override", opts->seed_override, "derive every stage seed from this value");
  sub->callback([opts, fn, &action] {
    action = [opts, fn] {
      ExperimentConfig cfg = load_config(opts->config);
      if (opts->seed_override)
        cfg = with_seed_override(cfg, *opts->seed_override);
      std::cout << fn(cfg, RunPaths{opts->out}).dump(2) << "\n";
    };
  });
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"DR-KRnet experiment pipeline"};
  app.require_subcommand(1);
  std::function<void()> action;

  add_stage(app, "generate-data", "prior dataset, truth field and observations", cmd_generate_data, action);
  add_stage(app, "train-vae", "train the VAE prior", cmd_train_vae, action);
  add_stage(app, "train-surrogate", "train the physics-constrained surrogate", cmd_train_surrogate,
            action);
  add_stage(app, "infer-krnet", "fit the latent posterior flow", cmd_infer_krnet, action);
  add_stage(app, "infer-mcmc", "pCN baseline in the latent space", cmd_infer_mcmc, action);

  std::vector<std::string> runs;
  std::string report_out;
  CLI::App *report = app.add_subcommand("report", "comparison table over finished runs");
  report->add_option("runs", runs, "run directories")->required();
  report->add_option("--out", report_out, "directory for report.csv")->required();
  report->callback([&] {
    action = [&] {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      std::cout << cmd_report(dirs, report_out);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    action();
  } catch (const NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
