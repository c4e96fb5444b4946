#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepdpo/model.hpp"
#include "stepdpo/pref.hpp"
#include "stepdpo/task.hpp"

namespace stepdpo {

struct AccuracyReport {
  double accuracy = 0;
  long n = 0;
  long correct = 0;
  long unparseable = 0;
};

/// Greedy decoding from prompt ⊕ CoT prefix; an answer counts when its final
/// answer parses and equals the ground truth.
template <class T>
AccuracyReport eval_accuracy(const Model<T>& m, std::span<const Problem> problems, int max_new = 0, int workers = 1);

struct JudgeReport {
  double judge_accuracy = 0;  // ties count one half
  double mean_margin = 0;
  std::vector<double> margins;
};

template <class T>
JudgeReport judge_pairs(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> pairs,
                        double beta, int workers = 1);

/// Reference per-token log-probability of self-generated versus canonical
/// winning steps over pairs sharing prompt, prefix and losing step.
struct OodProbe {
  long n = 0;
  double id_mean = 0;   // mean over pairs of per-token log-prob, own steps
  double ood_mean = 0;  // same for canonical compact steps
  long id_higher = 0;   // pairs where the own step scores higher
  long ties = 0;
  double sign_test_p = 1;  // two-sided exact binomial, ties dropped
};

/// Pairs are matched by (problem_id, k, prefix, lose_step); unmatched pairs
/// are ignored. Throws Error(empty_dataset) when nothing matches.
template <class T>
OodProbe ood_probe(const Model<T>& ref, std::span<const PreferencePair> id, std::span<const PreferencePair> ood,
                   int workers = 1);

/// Two-sided exact binomial sign test p-value for k successes out of n.
double sign_test(long k, long n);

nlohmann::ordered_json to_json(const AccuracyReport& r);
nlohmann::ordered_json to_json(const JudgeReport& r, bool with_margins);
nlohmann::ordered_json to_json(const OodProbe& p);

}  // namespace stepdpo
