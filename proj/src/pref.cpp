#include "stepdpo/pref.hpp"

#include <algorithm>
#include <cmath>

#include "stepdpo/error.hpp"

namespace stepdpo {

const char* to_string(Provenance p) {
  return p == Provenance::canonical_oracle ? "canonical_oracle" : "self_generated";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "self_generated") return Provenance::self_generated;
  if (s == "canonical_oracle") return Provenance::canonical_oracle;
  throw Error(ErrorKind::parse, "unknown provenance \"" + s + "\"");
}

const char* to_string(PrefMode m) { return m == PrefMode::dpo ? "dpo" : "step-dpo"; }

PrefMode pref_mode_from_string(const std::string& s) {
  if (s == "dpo") return PrefMode::dpo;
  if (s == "step-dpo" || s == "step_dpo") return PrefMode::step_dpo;
  throw Error(ErrorKind::config, "unknown preference mode \"" + s + "\" (expected dpo or step-dpo)");
}

TokenSeq PreferencePair::condition() const {
  TokenSeq c = prompt;
  c.insert(c.end(), prefix.begin(), prefix.end());
  return c;
}

ScoredPair to_scored(const FullPair& p) { return {make_span(p.prompt, p.win), make_span(p.prompt, p.lose)}; }

ScoredPair to_scored(const PreferencePair& p) {
  const TokenSeq c = p.condition();
  return {make_span(c, p.win_step), make_span(c, p.lose_step)};
}

std::vector<ScoredPair> to_scored(std::span<const FullPair> pairs) {
  std::vector<ScoredPair> out;
  for (const auto& p : pairs) out.push_back(to_scored(p));
  return out;
}

std::vector<ScoredPair> to_scored(std::span<const PreferencePair> pairs) {
  std::vector<ScoredPair> out;
  for (const auto& p : pairs) out.push_back(to_scored(p));
  return out;
}

void PrefConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "pref: " + m); };
  if (!(beta > 0) || !std::isfinite(beta)) fail("beta must be positive");
  if (!(peak_lr > 0) || !std::isfinite(peak_lr)) fail("peak_lr must be positive");
  if (!(warmup_ratio >= 0 && warmup_ratio < 1)) fail("warmup_ratio must be in [0, 1)");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (!(divergence_factor > 1)) fail("divergence_factor must exceed 1");
  if (divergence_patience < 1) fail("divergence_patience must be >= 1");
  if (workers < 1) fail("workers must be >= 1");
}

std::vector<ScoredSpan> flatten(std::span<const ScoredPair> pairs) {
  std::vector<ScoredSpan> spans;
  spans.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    spans.push_back(p.win);
    spans.push_back(p.lose);
  }
  return spans;
}

namespace {

// -log sigmoid(z) without overflow.
double softplus_neg(double z) { return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

template <class T>
LossFn<T> pref_loss_fn(std::span<const T> ref_lp, double beta) {
  return [ref_lp, beta](std::span<const T> lp, std::span<T> d) {
    const std::size_t n = lp.size() / 2;
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = beta * ((static_cast<double>(lp[2 * i]) - static_cast<double>(lp[2 * i + 1])) -
                               (static_cast<double>(ref_lp[2 * i]) - static_cast<double>(ref_lp[2 * i + 1])));
      loss += softplus_neg(z);
      const double g = -beta * sigmoid(-z) / static_cast<double>(n);
      d[2 * i] = static_cast<T>(g);
      d[2 * i + 1] = static_cast<T>(-g);
    }
    return static_cast<T>(loss / static_cast<double>(n));
  };
}

}  // namespace

template <class T>
T implicit_reward(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const Token> condition,
                  std::span<const Token> completion, double beta) {
  const T lp = seq_logprob(policy, condition, completion);
  const T lr = seq_logprob(ref.model(), condition, completion);
  return static_cast<T>(beta * (static_cast<double>(lp) - static_cast<double>(lr)));
}

template <class T>
T preference_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> pairs,
                  double beta, int workers) {
  if (pairs.empty()) throw Error(ErrorKind::empty_dataset, "preference_loss: no pairs");
  const auto spans = flatten(pairs);
  const auto lp = span_logprobs(policy, std::span<const ScoredSpan>(spans), workers);
  const auto lr = span_logprobs(ref.model(), std::span<const ScoredSpan>(spans), workers);
  std::vector<T> d(lp.size());
  return pref_loss_fn<T>(lr, beta)(lp, d);
}

template <class T>
T dpo_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const FullPair> pairs, double beta,
           int workers) {
  const auto sp = to_scored(pairs);
  return preference_loss(policy, ref, std::span<const ScoredPair>(sp), beta, workers);
}

template <class T>
T step_dpo_loss(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const PreferencePair> pairs,
                double beta, int workers) {
  const auto sp = to_scored(pairs);
  return preference_loss(policy, ref, std::span<const ScoredPair>(sp), beta, workers);
}

template <class T>
LossGrad<T> preference_loss_and_grad(const Model<T>& policy, std::span<const ScoredPair> pairs,
                                     std::span<const T> ref_logprobs, double beta, int workers) {
  if (pairs.empty()) throw Error(ErrorKind::empty_dataset, "preference_loss_and_grad: no pairs");
  if (ref_logprobs.size() != 2 * pairs.size()) throw Error(ErrorKind::argument, "reference log-prob count mismatch");
  const auto spans = flatten(pairs);
  return loss_and_grad(policy, std::span<const ScoredSpan>(spans), pref_loss_fn<T>(ref_logprobs, beta), workers);
}

template <class T>
std::vector<double> reward_margins(const Model<T>& policy, std::span<const ScoredPair> pairs,
                                   std::span<const T> ref_logprobs, double beta, int workers) {
  if (ref_logprobs.size() != 2 * pairs.size()) throw Error(ErrorKind::argument, "reference log-prob count mismatch");
  const auto spans = flatten(pairs);
  const auto lp = span_logprobs(policy, std::span<const ScoredSpan>(spans), workers);
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double rw = beta * (static_cast<double>(lp[2 * i]) - static_cast<double>(ref_logprobs[2 * i]));
    const double rl = beta * (static_cast<double>(lp[2 * i + 1]) - static_cast<double>(ref_logprobs[2 * i + 1]));
    out[i] = rw - rl;
  }
  return out;
}

double judge_accuracy(std::span<const double> margins) {
  if (margins.empty()) throw Error(ErrorKind::empty_dataset, "judge_accuracy: no margins");
  double hits = 0;
  for (double m : margins) hits += m > 0 ? 1.0 : (m == 0 ? 0.5 : 0.0);
  return hits / static_cast<double>(margins.size());
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw Error(ErrorKind::empty_dataset, "mean of nothing");
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

template <class T>
PrefResult<T> train_pref(Model<T> policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> train,
                         std::span<const ScoredPair> heldout, const PrefConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorKind::empty_dataset, "train_pref: no training pairs");
  if (heldout.empty()) throw Error(ErrorKind::empty_dataset, "train_pref: no held-out pairs");
  if (!(policy.config() == ref.config())) throw Error(ErrorKind::argument, "train_pref: policy/reference config mismatch");

  const int W = cfg.workers;
  const auto train_spans = flatten(train);
  const auto heldout_spans = flatten(heldout);
  const auto ref_train = span_logprobs(ref.model(), std::span<const ScoredSpan>(train_spans), W);
  const auto ref_held = span_logprobs(ref.model(), std::span<const ScoredSpan>(heldout_spans), W);

  const std::size_t n = train.size();
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((n + B - 1) / B);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min<long>(total, cfg.max_steps);

  MetricCurve curve({"lr", "loss", "judge_acc", "reward_margin"});
  auto evaluate = [&](long step, double lr, double loss) {
    const auto margins = reward_margins(policy, heldout, std::span<const T>(ref_held), cfg.beta, W);
    curve.add(step, {lr, loss, judge_accuracy(margins), mean(margins)});
  };
  // Before any update the policy equals the reference and every margin is 0.
  evaluate(0, 0.0, std::log(2.0));

  OptimState<T> opt(policy.param_count());
  const AdamWHyper hp{0.9, 0.999, 1e-8, cfg.weight_decay};
  double initial_loss = -1, loss_acc = 0;
  int acc_n = 0, above = 0;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    for (std::size_t start = 0; start < n && step < total; start += B) {
      std::vector<ScoredPair> batch;
      std::vector<T> ref_lp;
      for (std::size_t i = start; i < std::min(n, start + B); ++i) {
        batch.push_back(train[order[i]]);
        ref_lp.push_back(ref_train[2 * order[i]]);
        ref_lp.push_back(ref_train[2 * order[i] + 1]);
      }
      auto lg = preference_loss_and_grad(policy, std::span<const ScoredPair>(batch), std::span<const T>(ref_lp),
                                         cfg.beta, W);
      const double loss = static_cast<double>(lg.loss);
      if (initial_loss < 0) initial_loss = loss;
      above = loss > cfg.divergence_factor * initial_loss ? above + 1 : 0;
      if (above >= cfg.divergence_patience) {
        throw Error(ErrorKind::numerical, "train_pref: loss diverged (above " +
                                              format_number(cfg.divergence_factor) + "x initial for " +
                                              std::to_string(above) + " steps)");
      }
      clip_grad_norm(std::span<T>(lg.grad), cfg.grad_clip);
      const double lr = lr_schedule(step, total, cfg.peak_lr, cfg.warmup_ratio, Schedule::cosine);
      if (!adamw_step(policy.params(), std::span<const T>(lg.grad), opt, lr, hp)) {
        throw Error(ErrorKind::numerical, "train_pref: non-finite gradient at step " + std::to_string(step + 1));
      }
      ++step;
      loss_acc += loss;
      ++acc_n;
      if (step % cfg.eval_every == 0 || step == total) {
        evaluate(step, lr, loss_acc / acc_n);
        loss_acc = 0;
        acc_n = 0;
      }
    }
  }
  return {std::move(policy), std::move(curve)};
}

#define STEPDPO_INSTANTIATE(T)                                                                                      \
  template T implicit_reward<T>(const Model<T>&, const ReferenceModel<T>&, std::span<const Token>,                  \
                                std::span<const Token>, double);                                                    \
  template T preference_loss<T>(const Model<T>&, const ReferenceModel<T>&, std::span<const ScoredPair>, double,     \
                                int);                                                                               \
  template T dpo_loss<T>(const Model<T>&, const ReferenceModel<T>&, std::span<const FullPair>, double, int);        \
  template T step_dpo_loss<T>(const Model<T>&, const ReferenceModel<T>&, std::span<const PreferencePair>, double,   \
                              int);                                                                                 \
  template LossGrad<T> preference_loss_and_grad<T>(const Model<T>&, std::span<const ScoredPair>, std::span<const T>, \
                                                   double, int);                                                    \
  template std::vector<double> reward_margins<T>(const Model<T>&, std::span<const ScoredPair>, std::span<const T>,  \
                                                 double, int);                                                      \
  template PrefResult<T> train_pref<T>(Model<T>, const ReferenceModel<T>&, std::span<const ScoredPair>,             \
                                       std::span<const ScoredPair>, const PrefConfig&);

STEPDPO_INSTANTIATE(float)
STEPDPO_INSTANTIATE(double)
#undef STEPDPO_INSTANTIATE

}  // namespace stepdpo
