#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stepdpo/curves.hpp"
#include "stepdpo/model.hpp"
#include "stepdpo/task.hpp"
#include "stepdpo/train.hpp"

namespace stepdpo {

/// Whole-answer preference: prompt (with CoT prefix), preferred and
/// dispreferred completions.
struct FullPair {
  std::uint64_t problem_id = 0;
  TokenSeq prompt;
  TokenSeq win;
  TokenSeq lose;
};

enum class Provenance : std::uint8_t { self_generated, canonical_oracle };

const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/// Single-step preference. The condition is prompt ⊕ prefix, where the
/// prefix holds steps 1..k-1 and ends with the "Step k:" header.
struct PreferencePair {
  std::uint64_t problem_id = 0;
  int k = 1;
  TokenSeq prompt;
  TokenSeq prefix;
  TokenSeq win_step;
  TokenSeq lose_step;
  Provenance provenance = Provenance::self_generated;

  TokenSeq condition() const;
};

/// Both sides of a preference as scored spans.
struct ScoredPair {
  ScoredSpan win;
  ScoredSpan lose;
};

ScoredPair to_scored(const FullPair& p);
ScoredPair to_scored(const PreferencePair& p);
std::vector<ScoredPair> to_scored(std::span<const FullPair> pairs);
std::vector<ScoredPair> to_scored(std::span<const PreferencePair> pairs);

enum class PrefMode : std::uint8_t { dpo, step_dpo };

const char* to_string(PrefMode m);
PrefMode pref_mode_from_string(const std::string& s);

struct PrefConfig {
  double beta = 0.4;
  PrefMode mode = PrefMode::step_dpo;
  double peak_lr = 5e-6;
  double warmup_ratio = 0.1;
  int epochs = 4;
  int batch_size = 16;
  int max_steps = 0;  // 0: no cap
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int eval_every = 10;
  /// Abort when the batch loss stays above this multiple of its initial value.
  double divergence_factor = 10.0;
  int divergence_patience = 50;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

/// beta * (log pi(y|x) - log pi_ref(y|x))
template <class T>
T implicit_reward(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const Token> condition,
                  std::span<const Token> completion, double beta);

/// Mean over pairs of -log sigmoid(beta * (Δpolicy - Δref)), where Δ is the
/// win minus lose log-probability.
template <class T>
T preference_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> pairs,
                  double beta, int workers = 1);

template <class T>
T dpo_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const FullPair> pairs, double beta,
           int workers = 1);
template <class T>
T step_dpo_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const PreferencePair> pairs,
                double beta, int workers = 1);

/// Loss and parameter gradient given precomputed reference log-probabilities
/// laid out as [win_0, lose_0, win_1, lose_1, ...].
template <class T>
LossGrad<T> preference_loss_and_grad(const Model<T>& policy, std::span<const ScoredPair> pairs,
                                     std::span<const T> ref_logprobs, double beta, int workers = 1);

/// Policy/reference log-probabilities of every pair side, interleaved as
/// [win_0, lose_0, ...].
std::vector<ScoredSpan> flatten(std::span<const ScoredPair> pairs);

/// Reward margins r_win - r_lose for every pair.
template <class T>
std::vector<double> reward_margins(const Model<T>& policy, std::span<const ScoredPair> pairs,
                                   std::span<const T> ref_logprobs, double beta, int workers = 1);

/// Fraction of positive margins, ties counted as one half.
double judge_accuracy(std::span<const double> margins);
double mean(std::span<const double> xs);

template <class T>
struct PrefResult {
  Model<T> model;
  MetricCurve curve;  // step, lr, loss, judge_acc, reward_margin
};

/// Preference optimisation of `policy` against the frozen reference with a
/// warmup + cosine schedule. judge_acc and reward_margin are measured on
/// `heldout` every eval_every steps (and at steps 0 and final). Throws
/// Error(empty_dataset) for no training pairs and Error(numerical) on
/// non-finite values or sustained divergence.
template <class T>
PrefResult<T> train_pref(Model<T> policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> train,
                         std::span<const ScoredPair> heldout, const PrefConfig& cfg);

}  // namespace stepdpo
