#include "stepdpo/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "stepdpo/error.hpp"
#include "stepdpo/parallel.hpp"
#include "stepdpo/rng.hpp"

namespace stepdpo {

namespace {

// Stream tags keep the stages' random draws independent of each other.
constexpr std::uint64_t kCollectTag = 1, kRectifyTag = 2, kFullTag = 3;
constexpr std::string_view kStepOne = "Step 1:";

SampleOptions sample_options(const SamplingConfig& s, const PipelineConfig& cfg, std::uint64_t seed) {
  SampleOptions o;
  o.temperature = s.temperature;
  o.greedy = false;
  o.max_new = cfg.max_new > 0 ? cfg.max_new : 1 << 20;
  o.seed = seed;
  return o;
}

std::unordered_map<std::uint64_t, const Problem*> index_problems(std::span<const Problem> problems) {
  std::unordered_map<std::uint64_t, const Problem*> idx;
  for (const auto& p : problems) idx[p.id] = &p;
  return idx;
}

// Steps of a verbatim prefix ("... Step k:"), or nullopt if it does not parse.
std::optional<std::vector<Step>> prefix_steps_of(std::string_view prefix, int k) {
  if (k == 1) {
    if (!prefix.empty()) return std::nullopt;
    return std::vector<Step>{};
  }
  const std::string header = "Step " + std::to_string(k) + ":";
  if (prefix.size() < header.size() || prefix.substr(prefix.size() - header.size()) != header) return std::nullopt;
  std::string text(kStepOne);
  text += prefix.substr(0, prefix.size() - header.size());
  while (!text.empty() && text.back() == ' ') text.pop_back();
  auto sol = try_parse_solution(text);
  if (!sol || sol->final_answer || static_cast<int>(sol->steps.size()) != k - 1) return std::nullopt;
  return sol->steps;
}

}  // namespace

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "pipeline: " + m); };
  for (const auto* s : {&collect, &rectify}) {
    if (!(s->temperature > 0) || !std::isfinite(s->temperature)) fail("temperature must be positive");
    if (s->n < 1) fail("sample count must be >= 1");
  }
  if (max_new < 0) fail("max_new must be >= 0");
  if (workers < 1) fail("workers must be >= 1");
}

const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::correct: return "correct";
    case Outcome::erroneous: return "erroneous";
    default: return "unparseable";
  }
}

template <class T>
Collection collect_errors(const Model<T>& ref, std::span<const Problem> problems, const PipelineConfig& cfg) {
  cfg.validate();
  const std::size_t n = static_cast<std::size_t>(cfg.collect.n);
  Collection c;
  c.attempts.resize(problems.size() * n);
  const std::uint64_t base = derive_seed(cfg.seed, kCollectTag);
  parallel_for(c.attempts.size(), cfg.workers, [&](std::size_t i) {
    const Problem& p = problems[i / n];
    Attempt& a = c.attempts[i];
    a.problem_id = p.id;
    a.attempt = static_cast<int>(i % n);
    const auto prompt = tokenize(prompt_with_cot(p));
    const auto r = sample(ref, prompt, sample_options(cfg.collect, cfg, derive_seed(base, p.id, a.attempt)));
    a.completion = detokenize(r.tokens);
    a.ended = r.ended;
    a.solution = parse_completion(a.completion);
    if (!a.solution) a.outcome = Outcome::unparseable;
    else if (a.solution->final_answer && *a.solution->final_answer == p.ground_truth) a.outcome = Outcome::correct;
    else a.outcome = Outcome::erroneous;
  });
  for (const auto& a : c.attempts) {
    ++c.sampled;
    if (a.outcome == Outcome::correct) ++c.correct;
    else if (a.outcome == Outcome::erroneous) ++c.erroneous;
    else ++c.unparseable;
  }
  return c;
}

std::optional<LocalizedError> localize(const Problem& p, const Attempt& a) {
  if (!a.solution || a.problem_id != p.id) return std::nullopt;
  const auto loc = localize_first_error(*a.solution, p);
  if (loc.kind != Localization::Kind::first_error) return std::nullopt;
  LocalizedError e;
  e.problem_id = p.id;
  e.attempt = a.attempt;
  e.k = loc.k;
  e.prefix_steps.assign(a.solution->steps.begin(), a.solution->steps.begin() + (loc.k - 1));
  const std::string full = std::string(kStepOne) + a.completion;
  const auto bodies = step_bodies(full);
  if (static_cast<int>(bodies.size()) < loc.k) return std::nullopt;
  const std::string_view body = bodies[loc.k - 1];
  const std::size_t body_at = static_cast<std::size_t>(body.data() - full.data());
  e.prefix = full.substr(kStepOne.size(), body_at - kStepOne.size());
  e.lose_text = std::string(body);
  return e;
}

template <class T>
std::optional<PreferencePair> rectify(const Model<T>& ref, const Problem& p, const LocalizedError& e,
                                      const PipelineConfig& cfg) {
  const std::string cond_text = prompt_with_cot(p) + e.prefix;
  const auto cond = tokenize(cond_text);
  const std::uint64_t base = derive_seed(derive_seed(cfg.seed, kRectifyTag), p.id, static_cast<std::uint64_t>(e.attempt));
  for (int j = 0; j < cfg.rectify.n; ++j) {
    const auto r = sample(ref, cond, sample_options(cfg.rectify, cfg, derive_seed(base, static_cast<std::uint64_t>(j))));
    const std::string full = std::string(kStepOne) + e.prefix + detokenize(r.tokens);
    const auto sol = try_parse_solution(full);
    if (!sol || !sol->final_answer || *sol->final_answer != p.ground_truth) continue;
    if (static_cast<int>(sol->steps.size()) < e.k) continue;
    const Step& win = sol->steps[e.k - 1];
    if (verify_step_in_context(p, e.prefix_steps, win) != Verdict::valid) continue;
    const auto bodies = step_bodies(full);
    const std::string win_text(bodies.at(e.k - 1));
    if (win_text == e.lose_text) continue;
    PreferencePair pair;
    pair.problem_id = p.id;
    pair.k = e.k;
    pair.prompt = tokenize(prompt_with_cot(p));
    pair.prefix = tokenize(e.prefix);
    pair.win_step = tokenize(win_text);
    pair.lose_step = tokenize(e.lose_text);
    pair.provenance = Provenance::self_generated;
    return pair;
  }
  return std::nullopt;
}

template <class T>
StepDataset build_step_dpo_dataset(const Model<T>& ref, std::span<const Problem> problems, const PipelineConfig& cfg,
                                   Collection* collection_out) {
  Collection col = collect_errors(ref, problems, cfg);
  const auto idx = index_problems(problems);
  StepDataset ds;
  ds.problems = static_cast<long>(problems.size());
  ds.sampled = col.sampled;
  ds.correct = col.correct;
  ds.erroneous = col.erroneous;
  ds.unparseable = col.unparseable;

  std::vector<LocalizedError> located;
  for (const auto& a : col.attempts) {
    if (a.outcome != Outcome::erroneous) continue;
    auto e = localize(*idx.at(a.problem_id), a);
    if (e) located.push_back(std::move(*e));
    else ++ds.unlocatable;
  }
  ds.localized = static_cast<long>(located.size());

  std::vector<std::optional<PreferencePair>> fixed(located.size());
  parallel_for(located.size(), cfg.workers,
               [&](std::size_t i) { fixed[i] = rectify(ref, *idx.at(located[i].problem_id), located[i], cfg); });

  std::set<std::tuple<std::uint64_t, int, TokenSeq, TokenSeq>> seen;
  for (std::size_t i = 0; i < located.size(); ++i) {
    if (!fixed[i]) {
      ++ds.rectify_failed;
      continue;
    }
    ++ds.rectified;
    auto& pair = *fixed[i];
    if (!seen.emplace(pair.problem_id, pair.k, pair.win_step, pair.lose_step).second) {
      ++ds.duplicates;
      continue;
    }
    ds.win_texts.push_back(detokenize(pair.win_step));
    ds.lose_texts.push_back(located[i].lose_text);
    ds.prefixes.push_back(located[i].prefix);
    ds.pairs.push_back(std::move(pair));
  }
  if (collection_out) *collection_out = std::move(col);
  if (ds.pairs.empty()) throw Error(ErrorKind::empty_dataset, "step pipeline produced no preference pairs");
  return ds;
}

StepDataset build_ood_variant(const StepDataset& id, std::span<const Problem> problems) {
  const auto idx = index_problems(problems);
  StepDataset ds = id;
  ds.pairs.clear();
  ds.win_texts.clear();
  ds.lose_texts.clear();
  ds.prefixes.clear();
  ds.dropped = 0;
  for (std::size_t i = 0; i < id.pairs.size(); ++i) {
    const auto& src = id.pairs[i];
    auto it = idx.find(src.problem_id);
    if (it == idx.end()) throw Error(ErrorKind::argument, "no problem with id " + std::to_string(src.problem_id));
    const auto prefix = prefix_steps_of(id.prefixes[i], src.k);
    const auto next = prefix ? canonical_next_step(*it->second, *prefix) : std::nullopt;
    const std::string win_text = next ? next->compact_body() : std::string();
    if (!next || win_text == id.lose_texts[i]) {
      ++ds.dropped;
      continue;
    }
    PreferencePair pair = src;
    pair.win_step = tokenize(win_text);
    pair.provenance = Provenance::canonical_oracle;
    ds.pairs.push_back(std::move(pair));
    ds.win_texts.push_back(win_text);
    ds.lose_texts.push_back(id.lose_texts[i]);
    ds.prefixes.push_back(id.prefixes[i]);
  }
  if (ds.pairs.empty()) throw Error(ErrorKind::empty_dataset, "canonical variant has no pairs");
  return ds;
}

template <class T>
FullDataset build_full_dpo_dataset(const Model<T>& ref, std::span<const Problem> problems,
                                   const Collection& collection, const PipelineConfig& cfg) {
  cfg.validate();
  FullDataset ds;
  ds.problems = static_cast<long>(problems.size());
  std::map<std::uint64_t, std::vector<const Attempt*>> wins, loses;
  for (const auto& a : collection.attempts) {
    if (!a.ended) continue;
    if (a.outcome == Outcome::correct) wins[a.problem_id].push_back(&a);
    else if (a.outcome == Outcome::erroneous) loses[a.problem_id].push_back(&a);
  }
  ds.problems_with_error = static_cast<long>(loses.size());

  // Extra whole-answer samples for problems that only have wrong answers.
  std::vector<const Problem*> need;
  for (const auto& p : problems) {
    if (loses.count(p.id) && !wins.count(p.id)) need.push_back(&p);
  }
  std::vector<std::optional<std::string>> extra(need.size());
  std::vector<long> drawn(need.size(), 0);
  const std::uint64_t base = derive_seed(cfg.seed, kFullTag);
  parallel_for(need.size(), cfg.workers, [&](std::size_t i) {
    const Problem& p = *need[i];
    const auto prompt = tokenize(prompt_with_cot(p));
    for (int j = 0; j < cfg.rectify.n; ++j) {
      ++drawn[i];
      const auto r = sample(ref, prompt, sample_options(cfg.rectify, cfg, derive_seed(base, p.id, j)));
      if (!r.ended) continue;
      std::string text = detokenize(r.tokens);
      const auto sol = parse_completion(text);
      if (sol && sol->final_answer && *sol->final_answer == p.ground_truth) {
        extra[i] = std::move(text);
        break;
      }
    }
  });
  std::map<std::uint64_t, std::string> extra_win;
  for (std::size_t i = 0; i < need.size(); ++i) {
    ds.extra_samples += drawn[i];
    if (extra[i]) extra_win[need[i]->id] = *extra[i];
  }

  const Token eos = Vocab::instance().eos();
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& p : problems) {
    auto lit = loses.find(p.id);
    if (lit == loses.end()) continue;
    std::vector<std::string> win_texts;
    if (auto wit = wins.find(p.id); wit != wins.end()) {
      for (const auto* a : wit->second) win_texts.push_back(a->completion);
    } else if (auto eit = extra_win.find(p.id); eit != extra_win.end()) {
      win_texts.push_back(eit->second);
    }
    if (win_texts.empty()) continue;
    bool any = false;
    const auto prompt = tokenize(prompt_with_cot(p));
    for (std::size_t i = 0; i < lit->second.size(); ++i) {
      const std::string& win = win_texts[i % win_texts.size()];
      const std::string& lose = lit->second[i]->completion;
      if (!seen.emplace(win, lose).second) {
        ++ds.duplicates;
        continue;
      }
      FullPair fp;
      fp.problem_id = p.id;
      fp.prompt = prompt;
      fp.win = tokenize(win);
      fp.win.push_back(eos);
      fp.lose = tokenize(lose);
      fp.lose.push_back(eos);
      ds.pairs.push_back(std::move(fp));
      ds.win_texts.push_back(win);
      ds.lose_texts.push_back(lose);
      any = true;
    }
    if (any) ++ds.problems_with_pair;
  }
  if (ds.pairs.empty()) throw Error(ErrorKind::empty_dataset, "whole-answer pipeline produced no pairs");
  return ds;
}

nlohmann::ordered_json step_manifest(const StepDataset& ds) {
  std::set<std::uint64_t> covered;
  std::map<int, long> by_k;
  for (const auto& p : ds.pairs) {
    covered.insert(p.problem_id);
    ++by_k[p.k];
  }
  nlohmann::ordered_json j;
  j["problems"] = ds.problems;
  j["sampled"] = ds.sampled;
  j["correct"] = ds.correct;
  j["erroneous"] = ds.erroneous;
  j["unparseable"] = ds.unparseable;
  j["localized"] = ds.localized;
  j["unlocatable"] = ds.unlocatable;
  j["rectified"] = ds.rectified;
  j["rectify_failed"] = ds.rectify_failed;
  j["duplicates"] = ds.duplicates;
  j["dropped"] = ds.dropped;
  j["pairs"] = static_cast<long>(ds.pairs.size());
  j["problems_covered"] = static_cast<long>(covered.size());
  nlohmann::ordered_json k = nlohmann::ordered_json::object();
  for (const auto& [kk, n] : by_k) k[std::to_string(kk)] = n;
  j["pairs_by_k"] = k;
  return j;
}

nlohmann::ordered_json full_manifest(const FullDataset& ds) {
  nlohmann::ordered_json j;
  j["problems"] = ds.problems;
  j["problems_with_error"] = ds.problems_with_error;
  j["problems_with_pair"] = ds.problems_with_pair;
  j["extra_samples"] = ds.extra_samples;
  j["duplicates"] = ds.duplicates;
  j["pairs"] = static_cast<long>(ds.pairs.size());
  return j;
}

long coverage_overlap(const StepDataset& a, const FullDataset& b) {
  std::set<std::uint64_t> sa, sb;
  for (const auto& p : a.pairs) sa.insert(p.problem_id);
  for (const auto& p : b.pairs) sb.insert(p.problem_id);
  long n = 0;
  for (auto id : sa) n += static_cast<long>(sb.count(id));
  return n;
}

namespace {

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

std::vector<nlohmann::json> read_json_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace

void write_step_pairs(const std::string& path, const StepDataset& ds) {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& p = ds.pairs[i];
    nlohmann::ordered_json j;
    j["problem_id"] = p.problem_id;
    j["prompt"] = detokenize(p.prompt);
    j["prefix"] = ds.prefixes[i];
    j["win_step"] = ds.win_texts[i];
    j["lose_step"] = ds.lose_texts[i];
    j["k"] = p.k;
    j["provenance"] = to_string(p.provenance);
    lines.push_back(j.dump());
  }
  write_lines(path, lines);
}

StepDataset read_step_dataset(const std::string& path) {
  StepDataset ds;
  for (const auto& j : read_json_lines(path)) {
    try {
      PreferencePair p;
      p.problem_id = j.at("problem_id").get<std::uint64_t>();
      p.prompt = tokenize(j.at("prompt").get<std::string>());
      const auto prefix = j.at("prefix").get<std::string>();
      const auto win = j.at("win_step").get<std::string>();
      const auto lose = j.at("lose_step").get<std::string>();
      p.prefix = tokenize(prefix);
      p.win_step = tokenize(win);
      p.lose_step = tokenize(lose);
      p.k = j.at("k").get<int>();
      p.provenance = provenance_from_string(j.at("provenance").get<std::string>());
      if (p.k < 1 || p.prompt.empty() || p.win_step.empty() || p.lose_step.empty()) {
        throw Error(ErrorKind::parse, path + ": malformed step pair");
      }
      ds.pairs.push_back(std::move(p));
      ds.prefixes.push_back(prefix);
      ds.win_texts.push_back(win);
      ds.lose_texts.push_back(lose);
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorKind::parse, path + ": " + ex.what());
    }
  }
  return ds;
}

std::vector<PreferencePair> read_step_pairs(const std::string& path) { return read_step_dataset(path).pairs; }

void write_full_pairs(const std::string& path, const FullDataset& ds) {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    nlohmann::ordered_json j;
    j["problem_id"] = ds.pairs[i].problem_id;
    j["prompt"] = detokenize(ds.pairs[i].prompt);
    j["win"] = ds.win_texts[i];
    j["lose"] = ds.lose_texts[i];
    lines.push_back(j.dump());
  }
  write_lines(path, lines);
}

std::vector<FullPair> read_full_pairs(const std::string& path) {
  const Token eos = Vocab::instance().eos();
  std::vector<FullPair> out;
  for (const auto& j : read_json_lines(path)) {
    try {
      FullPair p;
      p.problem_id = j.at("problem_id").get<std::uint64_t>();
      p.prompt = tokenize(j.at("prompt").get<std::string>());
      p.win = tokenize(j.at("win").get<std::string>());
      p.win.push_back(eos);
      p.lose = tokenize(j.at("lose").get<std::string>());
      p.lose.push_back(eos);
      if (p.prompt.empty()) throw Error(ErrorKind::parse, "malformed full pair");
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorKind::parse, path + ": " + ex.what());
    }
  }
  return out;
}

#define STEPDPO_INSTANTIATE(T)                                                                                   \
  template Collection collect_errors<T>(const Model<T>&, std::span<const Problem>, const PipelineConfig&);       \
  template std::optional<PreferencePair> rectify<T>(const Model<T>&, const Problem&, const LocalizedError&,      \
                                                    const PipelineConfig&);                                      \
  template StepDataset build_step_dpo_dataset<T>(const Model<T>&, std::span<const Problem>, const PipelineConfig&, \
                                                 Collection*);                                                   \
  template FullDataset build_full_dpo_dataset<T>(const Model<T>&, std::span<const Problem>, const Collection&,   \
                                                 const PipelineConfig&);

STEPDPO_INSTANTIATE(float)
STEPDPO_INSTANTIATE(double)
#undef STEPDPO_INSTANTIATE

}  // namespace stepdpo
