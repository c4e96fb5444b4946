// stepdpo <gen-tasks|sft|build-prefs|train-pref|eval|ablate> --config <path>
//         [--out <dir>] [--mode <m>] [--workers <n>] [--checkpoint <path>]

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stepdpo/error.hpp"
#include "stepdpo/experiment.hpp"
#include "stepdpo/version.hpp"

using namespace stepdpo;

int main(int argc, char** argv) {
  CLI::App app{"Step-level preference optimisation on synthetic arithmetic"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, build_mode, train_mode, checkpoint;
  int workers = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "run directory (default: out_dir from the config)");
    sub->add_option("--workers", workers, "worker threads (outputs do not depend on it)")->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("gen-tasks", "generate problems and the train/validation split");
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning on oracle solutions");
  auto* build = app.add_subcommand("build-prefs", "construct preference datasets from the SFT model");
  auto* train = app.add_subcommand("train-pref", "preference training from the SFT checkpoint");
  auto* eval = app.add_subcommand("eval", "accuracy and judge metrics of a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "SFT vs DPO vs Step-DPO, own vs canonical corrections");
  for (auto* sub : {gen, sft, build, train, eval, ablate}) add_common(sub);
  build->add_option("--mode", build_mode, "step | full | ood | all")->default_val("all");
  train->add_option("--mode", train_mode, "dpo | step-dpo | step-dpo-ood")->default_val("step-dpo");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate; relative paths are inside --out (default: sft.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (workers > 0) {
      cfg.workers = workers;
      cfg.propagate_workers();
    }
    const std::string out = out_dir.empty() ? cfg.out_dir : out_dir;
    if (gen->parsed()) cmd_gen_tasks(cfg, out);
    else if (sft->parsed()) cmd_sft(cfg, out);
    else if (build->parsed()) cmd_build_prefs(cfg, out, build_mode);
    else if (train->parsed()) cmd_train_pref(cfg, out, arm_from_string(train_mode));
    else if (eval->parsed()) cmd_eval(cfg, out, checkpoint);
    else if (ablate->parsed()) {
      const auto rep = cmd_ablate(cfg, out);
      std::cout << rep["trends_held"].dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "stepdpo: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "stepdpo: error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
