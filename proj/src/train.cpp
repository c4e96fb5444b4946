#include "stepdpo/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stepdpo/error.hpp"
#include "stepdpo/kernels.hpp"
#include "stepdpo/rng.hpp"

namespace stepdpo {

const char* to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "linear"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "cosine") return Schedule::cosine;
  if (s == "linear") return Schedule::linear_decay;
  throw Error(ErrorKind::config, "unknown schedule \"" + s + "\" (expected linear or cosine)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "train: " + m); };
  if (!(peak_lr > 0) || !std::isfinite(peak_lr)) fail("peak_lr must be positive");
  if (!(warmup_ratio >= 0 && warmup_ratio < 1)) fail("warmup_ratio must be in [0, 1)");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (!std::isfinite(grad_clip)) fail("grad_clip must be finite");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (log_every < 1) fail("log_every must be >= 1");
  if (workers < 1) fail("workers must be >= 1");
}

double lr_schedule(long t, long total, double peak_lr, double warmup_ratio, Schedule schedule) {
  if (total <= 0) return 0.0;
  t = std::clamp(t, 0L, total);
  const long warm = std::lround(warmup_ratio * static_cast<double>(total));
  if (t < warm) return peak_lr * static_cast<double>(t) / static_cast<double>(warm);
  const long span = total - warm;
  if (span <= 0) return 0.0;
  const double progress = static_cast<double>(t - warm) / static_cast<double>(span);
  if (schedule == Schedule::cosine) return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak_lr * (1.0 - progress);
}

template <class T>
bool adamw_step(std::span<T> params, std::span<const T> grads, OptimState<T>& state, double lr,
                const AdamWHyper& hp) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error(ErrorKind::argument, "adamw_step: size mismatch");
  }
  for (T g : grads) {
    if (!std::isfinite(g)) return false;
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  kernels::AdamWArgs<T> args{static_cast<T>(lr),
                             static_cast<T>(hp.beta1),
                             static_cast<T>(hp.beta2),
                             static_cast<T>(hp.eps),
                             static_cast<T>(hp.weight_decay),
                             static_cast<T>(1.0 - std::pow(hp.beta1, t)),
                             static_cast<T>(1.0 - std::pow(hp.beta2, t))};
  kernels::table<T>().adamw(params.data(), grads.data(), state.m.data(), state.v.data(), params.size(), args);
  return true;
}

template <class T>
double clip_grad_norm(std::span<T> g, double max_norm) {
  double sq = 0.0;
  for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (T& x : g) x *= scale;
  }
  return norm;
}

SftExample make_sft_example(const Problem& p) {
  SftExample ex;
  ex.problem_id = p.id;
  ex.prompt = tokenize(prompt_with_cot(p));
  ex.target = tokenize(completion_text(oracle_solution(p)));
  ex.target.push_back(Vocab::instance().eos());
  return ex;
}

namespace {

template <class T>
std::vector<ScoredSpan> sft_spans(std::span<const SftExample> batch) {
  std::vector<ScoredSpan> spans;
  spans.reserve(batch.size());
  for (const auto& ex : batch) spans.push_back(make_span(ex.prompt, ex.target));
  return spans;
}

template <class T>
LossFn<T> sft_loss_fn(std::span<const SftExample> batch) {
  std::vector<T> w;
  for (const auto& ex : batch) w.push_back(T(1) / (static_cast<T>(ex.target.size()) * static_cast<T>(batch.size())));
  return [w = std::move(w)](std::span<const T> lp, std::span<T> d) {
    T loss = 0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
      loss -= lp[i] * w[i];
      d[i] = -w[i];
    }
    return loss;
  };
}

}  // namespace

template <class T>
T sft_loss(const Model<T>& m, std::span<const SftExample> batch, int workers) {
  if (batch.empty()) throw Error(ErrorKind::argument, "sft_loss: empty batch");
  const auto spans = sft_spans<T>(batch);
  const auto lp = span_logprobs(m, std::span<const ScoredSpan>(spans), workers);
  std::vector<T> d(lp.size());
  return sft_loss_fn<T>(batch)(lp, d);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

template <class T>
TrainResult<T> train_sft(Model<T> model, std::span<const SftExample> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorKind::empty_dataset, "train_sft: no training examples");
  const std::size_t n = data.size();
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((n + B - 1) / B);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min<long>(total, cfg.max_steps);

  MetricCurve curve({"lr", "loss", "grad_norm"});
  OptimState<T> opt(model.param_count());
  const AdamWHyper hp{0.9, 0.999, 1e-8, cfg.weight_decay};
  double loss_acc = 0, norm_acc = 0;
  int acc_n = 0;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    for (std::size_t start = 0; start < n && step < total; start += B) {
      std::vector<SftExample> batch;
      for (std::size_t i = start; i < std::min(n, start + B); ++i) batch.push_back(data[order[i]]);
      const auto spans = sft_spans<T>(batch);
      auto lg = loss_and_grad(model, std::span<const ScoredSpan>(spans), sft_loss_fn<T>(batch), cfg.workers);
      const double norm = clip_grad_norm(std::span<T>(lg.grad), cfg.grad_clip);
      const double lr = lr_schedule(step, total, cfg.peak_lr, cfg.warmup_ratio, cfg.schedule);
      if (!adamw_step(model.params(), std::span<const T>(lg.grad), opt, lr, hp)) {
        throw Error(ErrorKind::numerical, "train_sft: non-finite gradient at step " + std::to_string(step + 1));
      }
      ++step;
      loss_acc += static_cast<double>(lg.loss);
      norm_acc += norm;
      ++acc_n;
      if (step % cfg.log_every == 0 || step == total) {
        curve.add(step, {lr, loss_acc / acc_n, norm_acc / acc_n});
        loss_acc = norm_acc = 0;
        acc_n = 0;
      }
    }
  }
  return {std::move(model), std::move(curve)};
}

#define STEPDPO_INSTANTIATE(T)                                                                              \
  template bool adamw_step<T>(std::span<T>, std::span<const T>, OptimState<T>&, double, const AdamWHyper&); \
  template double clip_grad_norm<T>(std::span<T>, double);                                                  \
  template T sft_loss<T>(const Model<T>&, std::span<const SftExample>, int);                                \
  template TrainResult<T> train_sft<T>(Model<T>, std::span<const SftExample>, const TrainConfig&);

STEPDPO_INSTANTIATE(float)
STEPDPO_INSTANTIATE(double)
#undef STEPDPO_INSTANTIATE

}  // namespace stepdpo
