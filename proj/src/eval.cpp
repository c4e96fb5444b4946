#include "stepdpo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "stepdpo/error.hpp"
#include "stepdpo/parallel.hpp"

namespace stepdpo {

template <class T>
AccuracyReport eval_accuracy(const Model<T>& m, std::span<const Problem> problems, int max_new, int workers) {
  if (problems.empty()) throw Error(ErrorKind::empty_dataset, "eval_accuracy: no problems");
  std::vector<std::uint8_t> verdict(problems.size());  // 0 wrong, 1 correct, 2 unparseable
  parallel_for(problems.size(), workers, [&](std::size_t i) {
    SampleOptions o;
    o.greedy = true;
    o.max_new = max_new > 0 ? max_new : 1 << 20;
    const auto r = sample(m, tokenize(prompt_with_cot(problems[i])), o);
    const auto sol = parse_completion(detokenize(r.tokens));
    if (!sol) verdict[i] = 2;
    else verdict[i] = sol->final_answer && *sol->final_answer == problems[i].ground_truth ? 1 : 0;
  });
  AccuracyReport rep;
  rep.n = static_cast<long>(problems.size());
  for (auto v : verdict) {
    rep.correct += v == 1;
    rep.unparseable += v == 2;
  }
  rep.accuracy = static_cast<double>(rep.correct) / static_cast<double>(rep.n);
  return rep;
}

template <class T>
JudgeReport judge_pairs(const Model<T>& policy, const ReferenceModel<T>& ref, std::span<const ScoredPair> pairs,
                        double beta, int workers) {
  if (pairs.empty()) throw Error(ErrorKind::empty_dataset, "judge_pairs: no pairs");
  const auto spans = flatten(pairs);
  const auto ref_lp = span_logprobs(ref.model(), std::span<const ScoredSpan>(spans), workers);
  JudgeReport r;
  r.margins = reward_margins(policy, pairs, std::span<const T>(ref_lp), beta, workers);
  r.judge_accuracy = judge_accuracy(r.margins);
  r.mean_margin = mean(r.margins);
  return r;
}

double sign_test(long k, long n) {
  if (n <= 0) return 1.0;
  // P(X <= min(k, n-k)) doubled, computed in log space.
  const long m = std::min(k, n - k);
  double tail = 0;
  for (long i = 0; i <= m; ++i) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
    tail += std::exp(lc - n * std::log(2.0));
  }
  return std::min(1.0, 2 * tail);
}

template <class T>
OodProbe ood_probe(const Model<T>& ref, std::span<const PreferencePair> id, std::span<const PreferencePair> ood,
                   int workers) {
  using Key = std::tuple<std::uint64_t, int, TokenSeq, TokenSeq>;
  std::map<Key, std::size_t> ood_at;
  for (std::size_t i = 0; i < ood.size(); ++i) {
    ood_at.emplace(Key{ood[i].problem_id, ood[i].k, ood[i].prefix, ood[i].lose_step}, i);
  }
  std::vector<ScoredSpan> spans;
  std::vector<double> lens;
  for (const auto& p : id) {
    auto it = ood_at.find(Key{p.problem_id, p.k, p.prefix, p.lose_step});
    if (it == ood_at.end()) continue;
    const auto cond = p.condition();
    spans.push_back(make_span(cond, p.win_step));
    spans.push_back(make_span(cond, ood[it->second].win_step));
    lens.push_back(static_cast<double>(p.win_step.size()));
    lens.push_back(static_cast<double>(ood[it->second].win_step.size()));
  }
  if (spans.empty()) throw Error(ErrorKind::empty_dataset, "ood_probe: no matched pairs");
  const auto lp = span_logprobs(ref, std::span<const ScoredSpan>(spans), workers);
  OodProbe r;
  r.n = static_cast<long>(spans.size() / 2);
  for (long i = 0; i < r.n; ++i) {
    const double a = static_cast<double>(lp[2 * i]) / lens[2 * i];
    const double b = static_cast<double>(lp[2 * i + 1]) / lens[2 * i + 1];
    r.id_mean += a;
    r.ood_mean += b;
    if (a > b) ++r.id_higher;
    else if (a == b) ++r.ties;
  }
  r.id_mean /= static_cast<double>(r.n);
  r.ood_mean /= static_cast<double>(r.n);
  r.sign_test_p = sign_test(r.id_higher, r.n - r.ties);
  return r;
}

nlohmann::ordered_json to_json(const AccuracyReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["n"] = r.n;
  j["correct"] = r.correct;
  j["unparseable"] = r.unparseable;
  return j;
}

nlohmann::ordered_json to_json(const JudgeReport& r, bool with_margins) {
  nlohmann::ordered_json j;
  j["judge_accuracy"] = r.judge_accuracy;
  j["mean_reward_margin"] = r.mean_margin;
  j["n_pairs"] = r.margins.size();
  if (with_margins) j["margins"] = r.margins;
  return j;
}

nlohmann::ordered_json to_json(const OodProbe& p) {
  nlohmann::ordered_json j;
  j["n"] = p.n;
  j["id_mean_token_logprob"] = p.id_mean;
  j["ood_mean_token_logprob"] = p.ood_mean;
  j["id_higher"] = p.id_higher;
  j["ties"] = p.ties;
  j["sign_test_p"] = p.sign_test_p;
  return j;
}

#define STEPDPO_INSTANTIATE(T)                                                                                       \
  template AccuracyReport eval_accuracy<T>(const Model<T>&, std::span<const Problem>, int, int);                     \
  template JudgeReport judge_pairs<T>(const Model<T>&, const ReferenceModel<T>&, std::span<const ScoredPair>, double, \
                                      int);                                                                          \
  template OodProbe ood_probe<T>(const Model<T>&, std::span<const PreferencePair>, std::span<const PreferencePair>,  \
                                 int);

STEPDPO_INSTANTIATE(float)
STEPDPO_INSTANTIATE(double)
#undef STEPDPO_INSTANTIATE

}  // namespace stepdpo
