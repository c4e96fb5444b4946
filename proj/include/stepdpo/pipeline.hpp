#pragma once

// Preference data construction from the reference model's own samples:
// error collection, first-error localization, rectification, plus the
// canonical-correction variant and whole-answer pairs for the DPO baseline.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepdpo/model.hpp"
#include "stepdpo/pref.hpp"
#include "stepdpo/task.hpp"

namespace stepdpo {

struct SamplingConfig {
  double temperature = 0.8;
  int n = 4;
};

struct PipelineConfig {
  SamplingConfig collect{0.8, 4};
  SamplingConfig rectify{0.8, 8};
  int max_new = 0;  // 0: as many tokens as the context allows
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

enum class Outcome : std::uint8_t { correct, erroneous, unparseable };

const char* to_string(Outcome o);

/// One sampled answer to a problem.
struct Attempt {
  std::uint64_t problem_id = 0;
  int attempt = 0;
  std::string completion;  // text after the CoT prefix
  bool ended = false;      // eos emitted
  Outcome outcome = Outcome::unparseable;
  std::optional<StepSolution> solution;
};

struct Collection {
  std::vector<Attempt> attempts;  // problem-major, attempt-minor
  long sampled = 0, correct = 0, erroneous = 0, unparseable = 0;
};

/// Samples collect.n answers per problem from the reference model. An answer
/// is correct iff it parses and its final answer equals the ground truth;
/// parseable answers that are not correct are erroneous.
template <class T>
Collection collect_errors(const Model<T>& ref, std::span<const Problem> problems, const PipelineConfig& cfg);

/// First wrong step of an erroneous answer, with verbatim text pieces.
struct LocalizedError {
  std::uint64_t problem_id = 0;
  int attempt = 0;
  int k = 1;
  std::vector<Step> prefix_steps;  // steps 1..k-1
  std::string prefix;              // verbatim, ends with "Step k:"; empty for k = 1
  std::string lose_text;           // verbatim body of step k
};

/// nullopt when no step is wrong (the answer is unlocatable).
std::optional<LocalizedError> localize(const Problem& p, const Attempt& a);

/// Samples rectify.n continuations of prompt ⊕ prefix; the first one that
/// reaches the ground truth and whose step k verifies in context and differs
/// from the losing step supplies the winning step.
template <class T>
std::optional<PreferencePair> rectify(const Model<T>& ref, const Problem& p, const LocalizedError& e,
                                      const PipelineConfig& cfg);

struct StepDataset {
  std::vector<PreferencePair> pairs;
  std::vector<std::string> win_texts;  // verbatim, aligned with pairs
  std::vector<std::string> lose_texts;
  std::vector<std::string> prefixes;
  long problems = 0;
  long sampled = 0, correct = 0, erroneous = 0, unparseable = 0;
  long localized = 0, unlocatable = 0;
  long rectified = 0, rectify_failed = 0, duplicates = 0;
  long dropped = 0;  // canonical variant only: no canonical next step
};

/// Full pipeline. Pairs are deduplicated on (problem, k, win, lose). Throws
/// Error(empty_dataset) if no pair survives.
template <class T>
StepDataset build_step_dpo_dataset(const Model<T>& ref, std::span<const Problem> problems, const PipelineConfig& cfg,
                                   Collection* collection_out = nullptr);

/// Replaces every winning step with the canonical next step for the same
/// prompt and prefix, rendered in the compact surface form.
StepDataset build_ood_variant(const StepDataset& id, std::span<const Problem> problems);

struct FullDataset {
  std::vector<FullPair> pairs;
  std::vector<std::string> win_texts;
  std::vector<std::string> lose_texts;
  long problems = 0;
  long problems_with_error = 0;
  long problems_with_pair = 0;
  long extra_samples = 0;
  long duplicates = 0;
};

/// Whole-answer pairs from the same collected samples: every erroneous
/// answer that ended is paired with a correct one for the same problem
/// (cycling through them). Problems without a correct sample get up to
/// rectify.n extra samples. Throws Error(empty_dataset) when empty.
template <class T>
FullDataset build_full_dpo_dataset(const Model<T>& ref, std::span<const Problem> problems,
                                   const Collection& collection, const PipelineConfig& cfg);

/// Accounting and coverage summaries. Identities:
///   sampled = correct + erroneous + unparseable
///   erroneous = localized + unlocatable
///   localized = rectified + rectify_failed
///   pairs = rectified - duplicates
nlohmann::ordered_json step_manifest(const StepDataset& ds);
nlohmann::ordered_json full_manifest(const FullDataset& ds);
/// Problems that contribute to both datasets.
long coverage_overlap(const StepDataset& a, const FullDataset& b);

/// {"problem_id","prompt","prefix","win_step","lose_step","k","provenance"}
void write_step_pairs(const std::string& path, const StepDataset& ds);
std::vector<PreferencePair> read_step_pairs(const std::string& path);
/// Pairs plus their verbatim texts; stage counts are left at zero.
StepDataset read_step_dataset(const std::string& path);
/// {"problem_id","prompt","win","lose"}; eos is implied at the end of both.
void write_full_pairs(const std::string& path, const FullDataset& ds);
std::vector<FullPair> read_full_pairs(const std::string& path);

}  // namespace stepdpo
