#pragma once

// End-to-end commands behind the command-line tool. Every command reads its
// inputs from and writes its outputs to one run directory, and every output
// is a pure function of the config and the input artifacts.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepdpo/model.hpp"
#include "stepdpo/pipeline.hpp"
#include "stepdpo/pref.hpp"
#include "stepdpo/task.hpp"
#include "stepdpo/train.hpp"

namespace stepdpo {

struct ExperimentConfig {
  std::uint64_t seed = 0;  // problem generation
  long n_problems = 6000;
  GenConfig task;
  ModelConfig model;
  TrainConfig sft;
  PipelineConfig pipeline;
  long pair_problems = 0;     // leading training problems fed to the pair pipeline; 0: all
  long heldout_problems = 0;  // leading validation problems for held-out pairs; 0: all
  long heldout_pairs = 500;
  PrefConfig pref;
  int eval_max_new = 0;
  long eval_problems = 0;  // cap on validation problems scored for accuracy; 0: all
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::string out_dir = "run";
  int workers = 1;

  /// Throws Error(config).
  void validate() const;
  /// Applies `workers` to every stage.
  void propagate_workers();
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Unknown keys and invalid values are Error(config).
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// Error(missing_input) when the file is absent, Error(config) when invalid.
ExperimentConfig load_experiment_config(const std::string& path);
/// Hash of everything that can change an output (so not out_dir or workers).
std::string config_hash(const ExperimentConfig& c);

/// {"config_hash", "tool_version"} stamped into every output.
nlohmann::ordered_json provenance(const ExperimentConfig& c);

// File names inside a run directory.
namespace files {
inline constexpr const char* problems = "problems.jsonl";
inline constexpr const char* train = "train.jsonl";
inline constexpr const char* val = "val.jsonl";
inline constexpr const char* split = "split.json";
inline constexpr const char* sft_ckpt = "sft.ckpt";
inline constexpr const char* sft_curve = "sft_curve.csv";
inline constexpr const char* sft_report = "sft.json";
inline constexpr const char* step_pairs = "step_pairs.jsonl";
inline constexpr const char* heldout_pairs = "heldout_pairs.jsonl";
inline constexpr const char* ood_pairs = "ood_pairs.jsonl";
inline constexpr const char* full_pairs = "full_pairs.jsonl";
inline constexpr const char* step_manifest = "step_manifest.json";
inline constexpr const char* ood_manifest = "ood_manifest.json";
inline constexpr const char* full_manifest = "full_manifest.json";
inline constexpr const char* ablation_csv = "ablation.csv";
inline constexpr const char* ablation_json = "ablation.json";
}  // namespace files

/// Pair sets a preference arm trains on.
enum class Arm : std::uint8_t { dpo, step_dpo, step_dpo_ood };

const char* to_string(Arm a);
Arm arm_from_string(const std::string& s);

void cmd_gen_tasks(const ExperimentConfig& cfg, const std::string& out);
void cmd_sft(const ExperimentConfig& cfg, const std::string& out);
/// mode: "step" (training and held-out step pairs), "ood" (requires the step
/// pairs), "full", or "all".
void cmd_build_prefs(const ExperimentConfig& cfg, const std::string& out, const std::string& mode);
/// Trains from the SFT checkpoint as both initial policy and reference.
void cmd_train_pref(const ExperimentConfig& cfg, const std::string& out, Arm arm);
/// Accuracy on the validation split and, when held-out pairs exist, judge
/// metrics against the SFT reference. Writes eval_<checkpoint stem>.json.
nlohmann::ordered_json cmd_eval(const ExperimentConfig& cfg, const std::string& out, const std::string& checkpoint);
/// SFT vs DPO vs Step-DPO vs canonical-correction Step-DPO, once per
/// ablation seed, sharing one SFT checkpoint. Missing upstream artifacts are
/// produced first.
nlohmann::ordered_json cmd_ablate(const ExperimentConfig& cfg, const std::string& out);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace stepdpo
