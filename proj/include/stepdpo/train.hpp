#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stepdpo/curves.hpp"
#include "stepdpo/model.hpp"
#include "stepdpo/task.hpp"

namespace stepdpo {

enum class Schedule : std::uint8_t { linear_decay, cosine };

const char* to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

struct TrainConfig {
  double peak_lr = 3e-4;
  Schedule schedule = Schedule::linear_decay;
  double warmup_ratio = 0.03;
  int epochs = 3;
  int batch_size = 32;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int max_steps = 0;       // 0: no cap
  int log_every = 10;
  std::uint64_t seed = 0;
  int workers = 1;

  /// Throws Error(config).
  void validate() const;
};

/// Learning rate at optimizer step t (0-based) of `total`: linear warmup over
/// round(warmup_ratio * total) steps to peak_lr, then linear or half-cosine
/// decay to zero at t == total.
double lr_schedule(long t, long total, double peak_lr, double warmup_ratio, Schedule schedule);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
struct OptimState {
  std::vector<T> m;
  std::vector<T> v;
  long t = 0;

  explicit OptimState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

/// One decoupled-weight-decay Adam update. Refuses (returns false, leaves
/// params and state untouched) when any gradient entry is non-finite.
template <class T>
bool adamw_step(std::span<T> params, std::span<const T> grads, OptimState<T>& state, double lr,
                const AdamWHyper& hp);

/// Scales g in place so its L2 norm is at most max_norm; returns the norm
/// before clipping.
template <class T>
double clip_grad_norm(std::span<T> g, double max_norm);

/// Prompt (problem text plus CoT prefix) and target (oracle completion + eos).
struct SftExample {
  std::uint64_t problem_id = 0;
  TokenSeq prompt;
  TokenSeq target;
};

SftExample make_sft_example(const Problem& p);

/// Mean over the batch of the target negative log-likelihood divided by the
/// target length. Prompt tokens are not scored. Throws Error(argument) when
/// the batch is empty.
template <class T>
T sft_loss(const Model<T>& m, std::span<const SftExample> batch, int workers = 1);

template <class T>
struct TrainResult {
  Model<T> model;
  MetricCurve curve;  // step, lr, loss, grad_norm
};

/// Seeded shuffle each epoch, fixed-size batches (last one may be short),
/// clipping, AdamW. Throws Error(empty_dataset) for no examples and
/// Error(numerical) when a step produces a non-finite loss or gradient.
template <class T>
TrainResult<T> train_sft(Model<T> model, std::span<const SftExample> data, const TrainConfig& cfg);

/// Epoch-wise permutation used by the trainers: Fisher-Yates from
/// Rng(derive_seed(seed, epoch)).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace stepdpo
