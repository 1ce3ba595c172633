// Command-line front end for the experiment pipeline.
//
//   hynet_cli <train|attack|report|all> --config cfg.json [--data-dir D]
//             [--out-dir D] [--seed N] [--subset-size N]
//
// Exit status is 0 on success; on failure the active stage name is printed
// and recorded in <out-dir>/FAILED, and the status is nonzero.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hynet/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"conditional-classifier robustness experiments"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir;
  std::uint64_t seed = 0;
  std::size_t subset_size = 0;
  bool seed_set = false, subset_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")
        ->required();
    sub->add_option("--data-dir", data_dir,
                    "directory holding the IDX dataset files");
    sub->add_option("--out-dir", out_dir, "artifact output directory");
    sub->add_option("--seed", seed, "override the config seed")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--subset-size", subset_size,
                    "override the attack subset size")
        ->each([&](const std::string&) { subset_set = true; });
  };
  for (const char* verb : {"train", "attack", "report", "all"})
    add_common(app.add_subcommand(verb));

  CLI11_PARSE(app, argc, argv);
  const std::string verb = app.get_subcommands().front()->get_name();

  std::string stage = "setup";
  try {
    hynet::ExperimentConfig cfg = hynet::load_config(config_path);
    if (seed_set) cfg.seed = seed;
    if (subset_set) cfg.attacks.subset_size = subset_size;
    if (data_dir.empty()) data_dir = cfg.default_data_dir;
    if (out_dir.empty()) out_dir = cfg.default_out_dir;
    if (out_dir.empty()) out_dir = "runs/" + cfg.experiment;

    hynet::blas::pin_single_thread();
    hynet::Experiment exp(std::move(cfg), data_dir, out_dir);
    std::cerr << "config hash " << exp.hash() << "\n";
    stage = verb;
    struct StageTracker {
      const hynet::Experiment& e;
      std::string& s;
      ~StageTracker() { s = e.current_stage(); }
    } tracker{exp, stage};
    exp.run(verb);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "FAILED [" << stage << "] " << e.what() << "\n";
    if (!out_dir.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(out_dir, ec);
      std::ofstream marker(std::filesystem::path(out_dir) / "FAILED");
      marker << stage << ": " << e.what() << "\n";
    }
    return 1;
  }
}
