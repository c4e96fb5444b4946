// Acceptance run: one PASS/FAIL line per criterion.
//
//   1 loss identities and scalar spot values
//   2 finite-difference gradient checks for SFT, DPO and Step-DPO
//   3 localization of injected faults and per-pair postconditions
//   4 held-out judge accuracy trend
//   5 held-out reward margin trend
//   6 task accuracy ordering
//   7 own versus canonical corrections
//   8 byte-identical reruns
//
// Criteria 4-7 read the report of `stepdpo ablate` on configs/standard.json;
// criterion 8 reruns every command of configs/smoke.json.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "corrupt.hpp"
#include "gradcheck.hpp"
#include "stepdpo/error.hpp"
#include "stepdpo/pipeline.hpp"
#include "stepdpo/pref.hpp"
#include "stepdpo/train.hpp"

using namespace stepdpo;
using namespace stepdpo::testing;
namespace fs = std::filesystem;

namespace {

struct Finding {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(STEPDPO_CLI) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double neg_log_sigmoid(double x) { return std::log1p(std::exp(-x)); }

Model<double> bias_model(Token w, double bw, Token l, double bl) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.context_len = 16;
  cfg.precision = Precision::f64;
  const auto layout = ParamLayout::build(cfg);
  std::vector<double> params(layout.total, 0.0);
  params[layout.b_head + static_cast<std::size_t>(w)] = bw;
  params[layout.b_head + static_cast<std::size_t>(l)] = bl;
  return Model<double>(cfg, params);
}

TokenSeq nonempty_tokens(Rng& r, std::size_t max_len) {
  return random_tokens(r, 1 + static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(max_len) - 1)));
}

PreferencePair random_step_pair(Rng& r) {
  PreferencePair p;
  p.k = 1 + static_cast<int>(r.uniform_int(0, 2));
  p.prompt = nonempty_tokens(r, 5);
  p.prefix = random_tokens(r, static_cast<std::size_t>(r.uniform_int(0, 4)));
  p.win_step = nonempty_tokens(r, 5);
  do p.lose_step = nonempty_tokens(r, 5);
  while (p.lose_step == p.win_step);
  return p;
}

FullPair random_full_pair(Rng& r) {
  FullPair p;
  p.prompt = nonempty_tokens(r, 5);
  p.win = nonempty_tokens(r, 7);
  do p.lose = nonempty_tokens(r, 7);
  while (p.lose == p.win);
  return p;
}

Finding criterion_1() {
  double worst_ln2 = 0;
  Rng r(101);
  for (int c = 0; c < 20; ++c) {
    const auto m = tiny_model(static_cast<std::uint64_t>(c), 1 + c % 2);
    const auto ref = clone_frozen(m);
    std::vector<FullPair> full;
    std::vector<PreferencePair> steps;
    for (int i = 0; i <= c % 7; ++i) {
      full.push_back(random_full_pair(r));
      steps.push_back(random_step_pair(r));
    }
    for (double beta : {0.1, 0.4, 0.5, 2.0}) {
      worst_ln2 = std::max(worst_ln2, std::abs(dpo_loss(m, ref, std::span<const FullPair>(full), beta) - std::log(2.0)));
      worst_ln2 = std::max(worst_ln2, std::abs(step_dpo_loss(m, ref, std::span<const PreferencePair>(steps), beta) -
                                               std::log(2.0)));
    }
  }
  // Log-ratio +0.5 on the win token and -0.5 on the lose token (reference uniform).
  const Token w = 7, l = 9;
  const auto ref = clone_frozen(bias_model(w, 0.0, l, 0.0));
  const auto pol = bias_model(w, 0.5, l, -0.5);
  FullPair fp{0, TokenSeq{1, 2, 3}, TokenSeq{w}, TokenSeq{l}};
  const double a = dpo_loss(pol, ref, std::span<const FullPair>(&fp, 1), 0.4);
  std::swap(fp.win, fp.lose);
  const double b = dpo_loss(pol, ref, std::span<const FullPair>(&fp, 1), 0.4);
  PreferencePair sp{0, 1, TokenSeq{1, 2, 3}, TokenSeq{}, TokenSeq{w}, TokenSeq{l}, Provenance::self_generated};
  const double c = step_dpo_loss(pol, ref, std::span<const PreferencePair>(&sp, 1), 0.4);
  const double err_a = std::abs(a - neg_log_sigmoid(0.4)), err_b = std::abs(b - neg_log_sigmoid(-0.4));
  const double err_c = std::abs(c - neg_log_sigmoid(0.4));
  const bool spot = std::abs(neg_log_sigmoid(0.4) - 0.513015) < 5e-7 && std::abs(neg_log_sigmoid(-0.4) - 0.913015) < 5e-7;
  Finding v;
  v.pass = worst_ln2 <= 1e-9 && err_a <= 1e-9 && err_b <= 1e-9 && err_c <= 1e-9 && spot;
  v.detail = "max |L - ln 2| = " + fmt(worst_ln2, 3) + " over 160 batches; -ln s(0.4) = " + fmt(a, 7) +
             ", -ln s(-0.4) = " + fmt(b, 7) + ", spot errors " + fmt(std::max({err_a, err_b, err_c}), 3);
  return v;
}

// Central differences carry roundoff near |L|·eps/h, so the denominator floor
// for coordinates with a near-zero gradient grows with the loss scale.
double noise_floor(double loss) { return 1e-6 * std::max(1.0, std::abs(loss)); }

Finding criterion_2() {
  const auto t0 = Clock::now();
  const int per_loss = 20;
  double worst[3] = {0, 0, 0};
  double spent[3] = {0, 0, 0};
  Rng r(202);
  GenConfig g;
  g.min_steps = 1;
  g.max_steps = 1;
  g.operand_max = 5;
  for (int c = 0; c < per_loss; ++c) {
    const auto seed = static_cast<std::uint64_t>(1000 + c);
    const int layers = 1 + c % 2;
    {
      const auto t = Clock::now();
      std::vector<SftExample> data;
      for (const auto& p : gen_problems(seed, 2, g)) data.push_back(make_sft_example(p));
      // Context sized to the data: every position row is a coordinate to difference.
      std::size_t ctx = 0;
      for (const auto& ex : data) ctx = std::max(ctx, ex.prompt.size() + ex.target.size());
      auto m = tiny_model(seed, layers, 8, 2, static_cast<int>(ctx));
      std::vector<ScoredSpan> spans;
      for (const auto& ex : data) spans.push_back(make_span(ex.prompt, ex.target));
      LossFn<double> f = [&](std::span<const double> lp, std::span<double> d) {
        double loss = 0;
        for (std::size_t i = 0; i < lp.size(); ++i) {
          const double wgt = 1.0 / (static_cast<double>(data[i].target.size()) * static_cast<double>(data.size()));
          loss -= wgt * lp[i];
          d[i] = -wgt;
        }
        return loss;
      };
      const auto lg = loss_and_grad(m, std::span<const ScoredSpan>(spans), f);
      const auto num = numeric_gradient(m, [&] { return sft_loss(m, std::span<const SftExample>(data)); });
      worst[0] = std::max(worst[0], compare_gradients(lg.grad, num, noise_floor(lg.loss)).max_rel);
      spent[0] += seconds_since(t);
    }
    for (int mode = 0; mode < 2; ++mode) {
      const auto t = Clock::now();
      const auto base = tiny_model(seed + 77 * static_cast<std::uint64_t>(mode + 1), layers);
      const auto ref = clone_frozen(base);
      auto pol = base;
      Rng pr(seed, 5 + static_cast<std::uint64_t>(mode));
      for (double& v : pol.params()) v += 0.05 * pr.normal();
      std::vector<ScoredPair> pairs;
      for (int i = 0; i < 3; ++i) {
        pairs.push_back(mode == 0 ? to_scored(random_full_pair(r)) : to_scored(random_step_pair(r)));
      }
      const auto spans = flatten(pairs);
      const auto ref_lp = span_logprobs(ref.model(), std::span<const ScoredSpan>(spans));
      const auto lg = preference_loss_and_grad(pol, std::span<const ScoredPair>(pairs), std::span<const double>(ref_lp),
                                               0.4);
      const auto num = numeric_gradient(pol, [&] {
        return preference_loss(pol, ref, std::span<const ScoredPair>(pairs), 0.4);
      });
      worst[1 + mode] = std::max(worst[1 + mode], compare_gradients(lg.grad, num, noise_floor(lg.loss)).max_rel);
      spent[1 + mode] += seconds_since(t);
    }
  }
  const double secs = seconds_since(t0);
  Finding v;
  v.pass = worst[0] < 1e-4 && worst[1] < 1e-4 && worst[2] < 1e-4 && secs < 120;
  v.detail = "max relative error SFT " + fmt(worst[0], 3) + ", DPO " + fmt(worst[1], 3) + ", Step-DPO " +
             fmt(worst[2], 3) + " over " + std::to_string(per_loss) + " instances each (h=1e-5, f64), " +
             fmt(secs, 3) + " s (" + fmt(spent[0], 3) + " / " + fmt(spent[1], 3) + " / " + fmt(spent[2], 3) + ")";
  return v;
}

// Independent re-check of a pair file: the prefix parses into k-1 steps that
// replay without error, the winning step is valid in context, the losing one
// is not.
struct PairAudit {
  long checked = 0;
  long bad = 0;
};

PairAudit audit_pairs(const fs::path& pairs_path, const std::vector<Problem>& problems) {
  std::map<std::uint64_t, const Problem*> idx;
  for (const auto& p : problems) idx[p.id] = &p;
  PairAudit a;
  const auto ds = read_step_dataset(pairs_path.string());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    ++a.checked;
    const auto& pair = ds.pairs[i];
    auto it = idx.find(pair.problem_id);
    bool ok = it != idx.end() && pair.win_step != pair.lose_step;
    const std::string head = "Step " + std::to_string(pair.k) + ":";
    std::vector<Step> prefix;
    if (ok && pair.k > 1) {
      const std::string& pre = ds.prefixes[i];
      ok = pre.size() > head.size() && pre.compare(pre.size() - head.size(), head.size(), head) == 0;
      if (ok) {
        std::string body = pre.substr(0, pre.size() - head.size());
        while (!body.empty() && body.back() == ' ') body.pop_back();
        const auto sol = try_parse_solution("Step 1:" + body);
        ok = sol && !sol->final_answer && static_cast<int>(sol->steps.size()) == pair.k - 1;
        if (ok) prefix = sol->steps;
      }
    } else if (ok) {
      ok = ds.prefixes[i].empty();
    }
    if (ok) {
      const Problem& p = *it->second;
      const auto win = try_parse_step(head + ds.win_texts[i]);
      const auto lose = try_parse_step(head + ds.lose_texts[i]);
      ok = win && lose &&
           localize_first_error(StepSolution{prefix, std::nullopt, SolutionSource::sampled}, p).kind !=
               Localization::Kind::first_error &&
           verify_step_in_context(p, prefix, *win) == stepdpo::Verdict::valid &&
           verify_step_in_context(p, prefix, *lose) == stepdpo::Verdict::invalid;
    }
    a.bad += !ok;
  }
  return a;
}

Finding criterion_3(const std::vector<fs::path>& run_dirs) {
  const auto t0 = Clock::now();
  GenConfig g;
  Rng rng(303);
  int done = 0, recovered = 0, recovered_text = 0;
  for (std::uint64_t s = 0; done < 1000; ++s) {
    const Problem p = gen_problem(s, g);
    const auto c = corrupt_oracle(p, rng);
    if (!c) continue;
    ++done;
    recovered += localize_first_error(c->solution, p).step() == c->fault;
    const auto from_text = localize_first_error(c->solution.render(), p);
    recovered_text += from_text && from_text->step() == c->fault;
  }
  PairAudit total;
  long files = 0;
  for (const auto& dir : run_dirs) {
    if (!fs::exists(dir / "train.jsonl")) continue;
    const auto train = read_problems_jsonl((dir / "train.jsonl").string());
    const auto val = read_problems_jsonl((dir / "val.jsonl").string());
    for (const auto& [name, problems] :
         std::vector<std::pair<std::string, const std::vector<Problem>*>>{
             {"step_pairs.jsonl", &train}, {"ood_pairs.jsonl", &train}, {"heldout_pairs.jsonl", &val}}) {
      if (!fs::exists(dir / name)) continue;
      const auto a = audit_pairs(dir / name, *problems);
      total.checked += a.checked;
      total.bad += a.bad;
      ++files;
    }
  }
  const double secs = seconds_since(t0);
  Finding v;
  v.pass = recovered == done && recovered_text == done && files > 0 && total.checked > 0 && total.bad == 0 &&
           secs < 60;
  v.detail = "fault index recovered " + std::to_string(recovered) + "/" + std::to_string(done) + " (structured), " +
             std::to_string(recovered_text) + "/" + std::to_string(done) + " (from text); pair audit " +
             std::to_string(total.checked - total.bad) + "/" + std::to_string(total.checked) + " valid across " +
             std::to_string(files) + " files, " + fmt(secs, 3) + " s";
  return v;
}

// Every command of the smoke config, run into `dir`.
bool smoke_pipeline(const fs::path& config, const fs::path& dir, int workers, const fs::path& log) {
  const std::string common = " --config " + config.string() + " --out " + dir.string() + " --workers " +
                             std::to_string(workers);
  const char* steps[] = {"gen-tasks",
                         "sft",
                         "build-prefs --mode step",
                         "build-prefs --mode ood",
                         "build-prefs --mode full",
                         "train-pref --mode dpo",
                         "train-pref --mode step-dpo",
                         "train-pref --mode step-dpo-ood",
                         "eval --checkpoint sft.ckpt",
                         "eval --checkpoint pref_step-dpo.ckpt"};
  for (const char* s : steps) {
    if (run_cli(std::string(s) + common, log) != 0) {
      progress(std::string("smoke step failed: ") + s);
      return false;
    }
  }
  return true;
}

Finding criterion_8(const fs::path& work) {
  const auto config = fs::path(STEPDPO_SOURCE_DIR) / "configs" / "smoke.json";
  const auto log = work / "smoke.log";
  const fs::path dirs[] = {work / "smoke_a", work / "smoke_b", work / "smoke_c"};
  for (const auto& d : dirs) fs::remove_all(d);
  Finding v;
  const int workers[] = {1, 1, 3};
  for (int i = 0; i < 3; ++i) {
    if (!smoke_pipeline(config, dirs[i], workers[i], log)) {
      v.detail = "a command failed; see " + log.string();
      return v;
    }
  }
  long compared = 0, differing = 0;
  std::string first_diff;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const auto name = entry.path().filename();
    for (int i = 1; i < 3; ++i) {
      ++compared;
      if (!fs::exists(dirs[i] / name) || slurp(entry.path()) != slurp(dirs[i] / name)) {
        ++differing;
        if (first_diff.empty()) first_diff = name.string();
      }
    }
  }
  long a_files = 0, jsonl = 0, csv = 0, ckpt = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    ++a_files;
    const auto ext = entry.path().extension();
    jsonl += ext == ".jsonl";
    csv += ext == ".csv";
    ckpt += ext == ".ckpt";
  }
  for (int i = 1; i < 3; ++i) {
    long n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dirs[i])) ++n;
    if (n != a_files) ++differing;
  }
  v.pass = differing == 0 && jsonl >= 6 && csv >= 4 && ckpt >= 4;
  v.detail = std::to_string(compared) + " file comparisons across 3 runs (workers 1, 1, 3): " +
             std::to_string(differing) + " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")") +
             "; " + std::to_string(jsonl) + " JSONL, " + std::to_string(csv) + " CSV, " + std::to_string(ckpt) +
             " checkpoints per run";
  return v;
}

struct AblationOutcome {
  bool ran = false;
  nlohmann::json report;
  double sft_seconds = 0;
  double per_seed_seconds = 0;
};

AblationOutcome run_ablation(const fs::path& work) {
  AblationOutcome o;
  const auto config = fs::path(STEPDPO_SOURCE_DIR) / "configs" / "standard.json";
  const auto dir = work / "standard";
  const auto log = work / "standard.log";
  fs::remove_all(dir);
  const std::string common = " --config " + config.string() + " --out " + dir.string();
  auto t0 = Clock::now();
  progress("standard recipe: gen-tasks + sft");
  if (run_cli("gen-tasks" + common, log) != 0 || run_cli("sft" + common, log) != 0) return o;
  o.sft_seconds = seconds_since(t0);
  progress("standard recipe: ablation");
  t0 = Clock::now();
  if (run_cli("ablate" + common, log) != 0) return o;
  o.report = nlohmann::json::parse(slurp(dir / "ablation.json"));
  o.per_seed_seconds = seconds_since(t0) / static_cast<double>(std::max<std::size_t>(1, o.report["seeds"].size()));
  o.ran = true;
  return o;
}

template <class F>
std::string per_seed(const nlohmann::json& rep, F f) {
  std::string s;
  for (const auto& seed : rep["seeds"]) {
    if (!s.empty()) s += "; ";
    s += "seed " + seed["seed"].dump() + ": " + f(seed);
  }
  return s;
}

double arm(const nlohmann::json& seed, const char* a, const char* key) { return seed["arms"][a][key].get<double>(); }

}  // namespace

// Arguments select criteria by number; none runs all eight.
int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int c) { return wanted.empty() || wanted.count(c) > 0; };
  const fs::path work = fs::path(STEPDPO_BINARY_DIR) / "acceptance";
  fs::create_directories(work);
  std::map<int, Finding> verdicts;

  if (want(1)) {
    progress("criterion 1");
    verdicts[1] = criterion_1();
  }
  if (want(2)) {
    progress("criterion 2");
    verdicts[2] = criterion_2();
  }
  if (want(8)) {
    progress("criterion 8 (smoke reruns)");
    verdicts[8] = criterion_8(work);
  }

  if (want(4) || want(5) || want(6) || want(7)) {
    const auto abl = run_ablation(work);
    if (!abl.ran) {
      const std::string why = "ablation did not complete; see " + (work / "standard.log").string();
      for (int c = 4; c <= 7; ++c) verdicts[c] = {false, why};
    } else {
      const auto& rep = abl.report;
      const auto& held = rep["trends_held"];
      const int need = held["seeds_needed"].get<int>();
      const int n = static_cast<int>(rep["seeds"].size());
      auto count = [&](const char* key) {
        int c = 0;
        for (const auto& s : rep["seeds"]) c += s["trends"][key].get<bool>();
        return c;
      };
      const double runtime_min = abl.per_seed_seconds / 60.0;
      {
        const int c = count("judge_above_0.6_and_dpo");
        verdicts[4] = {c >= need && runtime_min < 15,
                       std::to_string(c) + "/" + std::to_string(n) + " seeds (need " + std::to_string(need) + "); " +
                           per_seed(rep, [](const nlohmann::json& s) {
                             return "step-dpo " + fmt(arm(s, "step-dpo", "judge_accuracy")) + " vs dpo " +
                                    fmt(arm(s, "dpo", "judge_accuracy")) + " at " +
                                    s["arms"]["step-dpo"]["steps"].dump() + " steps";
                           }) +
                           "; " + fmt(runtime_min, 3) + " min per seed (all arms)"};
      }
      {
        const int c = count("margin_positive_and_above_dpo"), rho = count("margin_rises_with_step");
        verdicts[5] = {held["reward_margin"].get<bool>(),
                       std::to_string(c) + "/" + std::to_string(n) + " seeds margin > 0 and > dpo, " +
                           std::to_string(rho) + "/" + std::to_string(n) + " seeds Spearman > 0; " +
                           per_seed(rep, [](const nlohmann::json& s) {
                             return "margin " + fmt(arm(s, "step-dpo", "mean_reward_margin")) + " vs " +
                                    fmt(arm(s, "dpo", "mean_reward_margin")) + ", rho " +
                                    fmt(arm(s, "step-dpo", "margin_step_spearman"), 3);
                           })};
      }
      {
        const int c = count("accuracy_step_ge_dpo_ge_sft");
        const double sft = rep["sft_accuracy"].get<double>();
        verdicts[6] = {held["accuracy_ordering"].get<bool>(),
                       std::to_string(c) + "/" + std::to_string(n) + " seeds; sft " + fmt(sft) + "; " +
                           per_seed(rep, [](const nlohmann::json& s) {
                             return "step-dpo " + fmt(arm(s, "step-dpo", "accuracy")) + ", dpo " +
                                    fmt(arm(s, "dpo", "accuracy"));
                           })};
      }
      {
        const int c = count("accuracy_id_ge_ood"), probe = count("probe_id_above_ood");
        verdicts[7] = {held["id_vs_ood"].get<bool>(),
                       std::to_string(c) + "/" + std::to_string(n) + " seeds ID >= OOD accuracy, probe ID > OOD on " +
                           std::to_string(probe) + "/" + std::to_string(n) + " builds; " +
                           per_seed(rep, [](const nlohmann::json& s) {
                             return "id " + fmt(arm(s, "step-dpo", "accuracy")) + " vs ood " +
                                    fmt(arm(s, "step-dpo-ood", "accuracy")) + ", log-prob " +
                                    fmt(s["ood_probe"]["id_mean_token_logprob"].get<double>()) + " vs " +
                                    fmt(s["ood_probe"]["ood_mean_token_logprob"].get<double>());
                           })};
      }
    }
  }

  if (want(3)) {
    progress("criterion 3");
    std::vector<fs::path> dirs;
    for (const char* d : {"smoke_a", "standard"}) dirs.push_back(work / d);
    if (fs::exists(work / "standard")) {
      for (const auto& e : fs::directory_iterator(work / "standard")) {
        if (e.is_directory()) dirs.push_back(e.path());
      }
    }
    verdicts[3] = criterion_3(dirs);
  }

  bool all = true;
  for (const auto& [c, v] : verdicts) {
    std::cout << "criterion " << c << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "\n";
    all = all && v.pass;
  }
  std::cout.flush();
  return all ? 0 : 1;
}
