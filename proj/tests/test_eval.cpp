#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradcheck.hpp"
#include "stepdpo/curves.hpp"
#include "stepdpo/error.hpp"
#include "stepdpo/eval.hpp"
#include "stepdpo/experiment.hpp"

using namespace stepdpo;
using namespace stepdpo::testing;

namespace {

Model<float> small_model(bool uniform) {
  ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.context_len = 128;
  mc.init_seed = 4;
  Model<float> m(mc);
  if (uniform) m.zero_output_head();
  return m;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("a uniform model solves essentially nothing") {
  GenConfig g;
  const auto problems = gen_problems(3, 500, g);
  const auto r = eval_accuracy(small_model(true), std::span<const Problem>(problems), 40);
  CHECK(r.n == 500);
  CHECK(r.accuracy < 0.02);
  CHECK(r.accuracy == static_cast<double>(r.correct) / 500.0);
}

TEST_CASE("eval_accuracy agrees with a hand-rolled greedy loop and ignores order") {
  GenConfig g;
  g.min_steps = 1;
  g.max_steps = 1;
  g.operand_max = 3;
  auto problems = gen_problems(8, 40, g);
  const auto m = small_model(false);
  long correct = 0;
  for (const auto& p : problems) {
    SampleOptions o;
    o.greedy = true;
    o.max_new = 30;
    const auto prompt = tokenize(prompt_with_cot(p));
    const auto r = sample(m, std::span<const Token>(prompt), o);
    const auto sol = parse_completion(detokenize(r.tokens));
    correct += sol && sol->final_answer == p.ground_truth;
  }
  const auto a = eval_accuracy(m, std::span<const Problem>(problems), 30);
  CHECK(a.correct == correct);
  std::reverse(problems.begin(), problems.end());
  const auto b = eval_accuracy(m, std::span<const Problem>(problems), 30, 3);
  CHECK(b.accuracy == a.accuracy);
  CHECK(b.unparseable == a.unparseable);
  CHECK_THROWS_AS(eval_accuracy(m, std::span<const Problem>()), Error);
}

TEST_CASE("judge report at the reference and with hand-set margins") {
  // Head-bias-only model: the policy raises the win token by 0.25 and lowers
  // the lose token by 0.25, so each margin is 0.4 * 0.5 = 0.2.
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.context_len = 16;
  cfg.precision = Precision::f64;
  const auto layout = ParamLayout::build(cfg);
  std::vector<double> zeros(layout.total, 0.0), raised = zeros;
  raised[layout.b_head + 7] = 0.25;
  raised[layout.b_head + 9] = -0.25;
  const Model<double> base(cfg, zeros), pol(cfg, raised);
  const auto ref = clone_frozen(base);
  FullPair fp{0, TokenSeq{1, 2}, TokenSeq{7}, TokenSeq{9}};
  const std::vector<ScoredPair> pairs{to_scored(fp), to_scored(fp)};
  const auto j = judge_pairs(pol, ref, std::span<const ScoredPair>(pairs), 0.4);
  CHECK(j.mean_margin == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(j.judge_accuracy == 1.0);
  const auto same = judge_pairs(base, ref, std::span<const ScoredPair>(pairs), 0.4);
  CHECK(same.judge_accuracy == 0.5);
  CHECK(same.mean_margin == 0.0);
  const auto js = to_json(j, true);
  CHECK(js["margins"].size() == 2);
  CHECK_FALSE(to_json(j, false).contains("margins"));
}

TEST_CASE("judge accuracy equals positive margins plus half the ties") {
  Rng r(3);
  const auto base = tiny_model(6);
  auto pol = base;
  for (double& v : pol.params()) v += 0.05 * r.normal();
  const auto ref = clone_frozen(base);
  std::vector<ScoredPair> pairs;
  for (int i = 0; i < 30; ++i) {
    FullPair fp{0, random_tokens(r, 4), random_tokens(r, 3), random_tokens(r, 3)};
    pairs.push_back(to_scored(fp));
  }
  pairs.push_back(pairs[0]);
  std::swap(pairs.back().win, pairs.back().lose);
  const auto j = judge_pairs(pol, ref, std::span<const ScoredPair>(pairs), 0.4);
  double hits = 0;
  for (double m : j.margins) hits += m > 0 ? 1 : (m == 0 ? 0.5 : 0);
  CHECK(j.judge_accuracy == hits / static_cast<double>(j.margins.size()));
}

TEST_CASE("sign test against exact binomial tails") {
  CHECK(sign_test(2, 10) == doctest::Approx(0.109375).epsilon(1e-12));
  CHECK(sign_test(8, 10) == doctest::Approx(0.109375).epsilon(1e-12));
  CHECK(sign_test(7, 20) == doctest::Approx(0.26317596435546875).epsilon(1e-10));
  CHECK(sign_test(30, 40) == doctest::Approx(0.0022214337732293643).epsilon(1e-9));
  CHECK(sign_test(5, 10) == 1.0);
  CHECK(sign_test(0, 0) == 1.0);
  CHECK(sign_test(10, 10) == doctest::Approx(2.0 / 1024).epsilon(1e-12));
}

TEST_CASE("spearman with average ranks") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505139).epsilon(1e-12));
  CHECK(spearman({0.1, 0.5, 0.2, 0.9, 0.9}, {1, 2, 3, 4, 5}) == doctest::Approx(0.8720815992723809).epsilon(1e-12));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
  CHECK_THROWS_AS(spearman({1}, {1}), Error);
}

TEST_CASE("ood probe matches pairs and compares per-token log-probs") {
  const auto m = tiny_model(2, 1, 8, 2, 96);
  const Problem p = make_problem(1, parse_expression("(1+2)×(3+4)"));
  PreferencePair a;
  a.problem_id = 1;
  a.k = 2;
  a.prompt = tokenize(prompt_with_cot(p));
  a.prefix = tokenize(" 1 + 2 = 3. Step 2:");
  a.win_step = tokenize(" 3 + 4 = 7.");
  a.lose_step = tokenize(" 3 + 4 = 8.");
  PreferencePair b = a;
  b.win_step = tokenize(" 3+4=7.");
  b.provenance = Provenance::canonical_oracle;
  PreferencePair stray = a;
  stray.problem_id = 99;
  const std::vector<PreferencePair> id{a, stray}, ood{b};
  const auto r = ood_probe(m, std::span<const PreferencePair>(id), std::span<const PreferencePair>(ood));
  CHECK(r.n == 1);
  const double ea = seq_logprob(m, a.condition(), a.win_step) / static_cast<double>(a.win_step.size());
  const double eb = seq_logprob(m, b.condition(), b.win_step) / static_cast<double>(b.win_step.size());
  CHECK(r.id_mean == doctest::Approx(ea).epsilon(1e-12));
  CHECK(r.ood_mean == doctest::Approx(eb).epsilon(1e-12));
  CHECK(r.id_higher == (ea > eb ? 1 : 0));
  const std::vector<PreferencePair> none{stray};
  CHECK_THROWS_AS(ood_probe(m, std::span<const PreferencePair>(none), std::span<const PreferencePair>(ood)), Error);
}

TEST_CASE("metric curves") {
  MetricCurve c({"lr", "loss"});
  c.add(0, {0.0, 0.6931471805599453});
  c.add(10, {1e-4, 0.5});
  CHECK_THROWS_AS(c.add(10, {1, 1}), Error);
  CHECK_THROWS_AS(c.add(11, {1}), Error);
  CHECK_THROWS_AS(c.add(12, {NAN, 1}), Error);
  CHECK_THROWS_AS(c.column("acc"), Error);
  CHECK(c.column("loss") == std::vector<double>{0.6931471805599453, 0.5});
  CHECK(curve_to_csv(c) == "step,lr,loss\n0,0,0.6931471805599453\n10,1e-04,0.5\n");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-0.0) == "0");
  CHECK(std::stod(format_number(1.0 / 3.0)) == 1.0 / 3.0);

  const std::string svg = curve_to_svg(c, "title & more", "config_hash abc");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<!-- config_hash abc -->") != std::string::npos);
  CHECK(svg.find("title &amp; more") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 3);

  const auto dir = std::filesystem::temp_directory_path() / "stepdpo_test_curves";
  std::filesystem::create_directories(dir);
  export_curves(c, (dir / "c.csv").string());
  CHECK(slurp(dir / "c.csv") == curve_to_csv(c));
  CHECK(std::filesystem::exists(dir / "c.svg"));
  CHECK_THROWS_AS(export_curves(MetricCurve({"x"}), (dir / "e.csv").string()), Error);
  CHECK_THROWS_AS(export_curves(c, (dir / "no_such_dir" / "c.csv").string()), Error);
}
