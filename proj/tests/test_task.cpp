#include <doctest.h>

#include <filesystem>
#include <set>

#include "corrupt.hpp"
#include "stepdpo/error.hpp"
#include "stepdpo/rng.hpp"
#include "stepdpo/task.hpp"

using namespace stepdpo;

namespace {

Problem problem_of(const std::string& expr) { return make_problem(0, parse_expression(expr)); }

Step step(int i, std::int64_t a, Op op, std::int64_t b, std::int64_t r) { return Step{i, a, op, b, r}; }

}  // namespace

TEST_CASE("vocabulary round-trips and rejects unknown symbols") {
  const std::string cot(kCotPrefix);
  CHECK(detokenize(tokenize(cot)) == cot);
  CHECK(tokenize("").empty());
  CHECK(detokenize(TokenSeq{}).empty());
  CHECK(Vocab::instance().size() == 42);
  try {
    tokenize("Step 1: 2 * 3");
    FAIL("expected a tokenize error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::tokenize);
    CHECK(std::string(e.what()).find("byte 10") != std::string::npos);
  }
  CHECK_THROWS_AS(detokenize(TokenSeq{Vocab::instance().eos()}), Error);
  CHECK_THROWS_AS(detokenize(TokenSeq{99}), Error);
}

TEST_CASE("problem generation is deterministic and respects bounds") {
  GenConfig cfg;
  CHECK(gen_problem(7, cfg).expression == gen_problem(7, cfg).expression);
  for (std::uint64_t s = 0; s < 500; ++s) {
    const Problem p = gen_problem(s, cfg);
    REQUIRE(p.expression.evaluate() == p.ground_truth);
    REQUIRE(p.expression.num_ops() >= cfg.min_steps);
    REQUIRE(p.expression.num_ops() <= cfg.max_steps);
    const auto sol = oracle_solution(p);
    for (const auto& st : sol.steps) {
      REQUIRE(st.result >= 0);
      REQUIRE(st.result <= cfg.value_bound);
      REQUIRE(verify_step(st) == Verdict::valid);
    }
    REQUIRE(static_cast<int>(tokenize(prompt_with_cot(p) + completion_text(sol)).size()) + 1 <=
            cfg.max_sequence_tokens());
  }
  GenConfig one = cfg;
  one.min_steps = one.max_steps = 1;
  CHECK(gen_problem(3, one).expression.num_ops() == 1);
}

TEST_CASE("neighbouring seeds rarely collide") {
  GenConfig cfg;
  int collisions = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) collisions += gen_problem(s, cfg).expression == gen_problem(s + 1, cfg).expression;
  CHECK(collisions < 50);
}

TEST_CASE("impossible generation configs are rejected") {
  GenConfig bad;
  bad.min_steps = 5;
  bad.max_steps = 2;
  CHECK_THROWS_AS(bad.validate(), Error);
  GenConfig zero;
  zero.operand_max = 0;
  CHECK_THROWS_AS(zero.validate(), Error);
  GenConfig tight;
  tight.context_budget = 20;
  CHECK_THROWS_AS(tight.validate(), Error);
}

TEST_CASE("oracle follows left-to-right depth-first order") {
  const Problem p = problem_of("((3+5)×2−4)÷2");
  CHECK(p.ground_truth == 6);
  const auto sol = oracle_solution(p);
  REQUIRE(sol.steps.size() == 4);
  CHECK(sol.steps[0] == step(1, 3, Op::add, 5, 8));
  CHECK(sol.steps[1] == step(2, 8, Op::mul, 2, 16));
  CHECK(sol.steps[2] == step(3, 16, Op::sub, 4, 12));
  CHECK(sol.steps[3] == step(4, 12, Op::div, 2, 6));
  CHECK(sol.final_answer == 6);
  CHECK(sol.source == SolutionSource::oracle);
  CHECK(oracle_solution(problem_of("2+2")).render() == "Step 1: 2 + 2 = 4. The final answer is 4.");
}

TEST_CASE("expression rendering round-trips through the parser") {
  GenConfig cfg;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Problem p = gen_problem(s, cfg);
    REQUIRE(parse_expression(p.expression.render()) == p.expression);
  }
  CHECK(problem_of("8−(3−1)").ground_truth == 6);
  CHECK(problem_of("8−3−1").ground_truth == 4);
  CHECK(problem_of("2+3×4").ground_truth == 14);
}

TEST_CASE("rendered oracle solutions round-trip") {
  GenConfig cfg;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Problem p = gen_problem(s, cfg);
    const auto sol = oracle_solution(p);
    const std::string text = sol.render();
    REQUIRE(detokenize(tokenize(text)) == text);
    auto back = parse_solution(text);
    back.source = SolutionSource::oracle;
    REQUIRE(back == sol);
    REQUIRE(back.render() == text);
    const auto comp = parse_completion(completion_text(sol));
    REQUIRE(comp);
    REQUIRE(comp->steps == sol.steps);
    REQUIRE(comp->final_answer == sol.final_answer);
  }
}

TEST_CASE("step verifier") {
  CHECK(verify_step(*try_parse_step("Step 2: 8 × 2 = 16.")) == Verdict::valid);
  CHECK(verify_step(*try_parse_step("Step 2: 8 × 2 = 15.")) == Verdict::invalid);
  CHECK(verify_step(*try_parse_step("Step 3: 7 ÷ 2 = 3.")) == Verdict::invalid);
  CHECK(verify_step(*try_parse_step("Step 3: 7 ÷ 0 = 0.")) == Verdict::invalid);
  // Negative numbers are outside the grammar.
  CHECK_FALSE(try_parse_step("Step 1: 3 − 5 = −2."));
}

TEST_CASE("solution parser tolerates spacing but not malformed text") {
  const auto a = try_parse_solution("Step 1: 8×2=16. The final answer is 16.");
  REQUIRE(a);
  CHECK(a->steps[0] == step(1, 8, Op::mul, 2, 16));
  const auto truncated = try_parse_solution("Step 1: 8 × 2 = 16. Step 2: 16 + 1 = 17.");
  REQUIRE(truncated);
  CHECK_FALSE(truncated->final_answer);
  CHECK_FALSE(try_parse_solution("Step 2: 8 × 2 = 16."));
  CHECK_FALSE(try_parse_solution("Step 1: 8 × 2 = 16. Step 3: 1 + 1 = 2."));
  CHECK_FALSE(try_parse_solution("Step 1: 08 × 2 = 16."));
  CHECK_FALSE(try_parse_solution("Step 1: 8 × 2 = 16"));
  CHECK_FALSE(try_parse_solution("Step 1: 8 × 2 = 16. The final answer is"));
  CHECK_THROWS_AS(parse_solution("nonsense"), Error);
}

TEST_CASE("localization of constructed faults") {
  const Problem p = problem_of("((3+5)×2−4)÷2");
  CHECK(localize_first_error(oracle_solution(p), p).kind == Localization::Kind::correct);
  CHECK_FALSE(localize_first_error(oracle_solution(p), p).step());

  auto sol = oracle_solution(p);
  sol.steps[1].result += 1;
  CHECK(localize_first_error(sol, p).step() == 2);

  // Arithmetically valid but the operand 7 is not available.
  auto fab = oracle_solution(p);
  fab.steps[1] = step(2, 7, Op::mul, 2, 14);
  CHECK(localize_first_error(fab, p).step() == 2);

  // All steps valid, final answer wrong: the unlocatable sentinel.
  auto wrong_final = oracle_solution(p);
  wrong_final.final_answer = 7;
  const auto loc = localize_first_error(wrong_final, p);
  CHECK(loc.kind == Localization::Kind::unlocatable);
  CHECK(loc.k == 5);
  CHECK_FALSE(loc.step());

  // Truncated but valid so far: also unlocatable.
  auto cut = oracle_solution(p);
  cut.steps.resize(2);
  cut.final_answer.reset();
  CHECK(localize_first_error(cut, p).kind == Localization::Kind::unlocatable);

  CHECK_FALSE(localize_first_error(std::string_view("garbage"), p));
}

TEST_CASE("a different valid evaluation order is not an error") {
  const Problem p = problem_of("(1+2)×(3+4)");
  StepSolution alt;
  alt.steps = {step(1, 3, Op::add, 4, 7), step(2, 1, Op::add, 2, 3), step(3, 3, Op::mul, 7, 21)};
  alt.final_answer = 21;
  CHECK(localize_first_error(alt, p).kind == Localization::Kind::correct);
}

TEST_CASE("localization recovers injected faults in 500 corrupted oracles") {
  GenConfig cfg;
  Rng rng(2024);
  int done = 0;
  for (std::uint64_t s = 0; done < 500; ++s) {
    const Problem p = gen_problem(s, cfg);
    const auto c = testing::corrupt_oracle(p, rng);
    if (!c) continue;
    ++done;
    REQUIRE(localize_first_error(c->solution, p).step() == c->fault);
    INFO(p.expression.render(), " | ", c->solution.render());
    REQUIRE(localize_first_error(c->solution.render(), p)->step() == c->fault);
  }
}

TEST_CASE("steps in context and the canonical next step") {
  const Problem p = problem_of("(1+2)×(3+4)");
  const std::vector<Step> prefix{step(1, 1, Op::add, 2, 3)};
  CHECK(verify_step_in_context(p, prefix, step(2, 3, Op::add, 4, 7)) == Verdict::valid);
  CHECK(verify_step_in_context(p, prefix, step(2, 3, Op::mul, 4, 12)) == Verdict::invalid);
  CHECK(verify_step_in_context(p, prefix, step(2, 3, Op::add, 4, 8)) == Verdict::invalid);
  CHECK(canonical_next_step(p, {}) == step(1, 1, Op::add, 2, 3));
  CHECK(canonical_next_step(p, prefix) == step(2, 3, Op::add, 4, 7));
  // Out-of-order prefix: the leftmost remaining node comes next.
  const std::vector<Step> alt{step(1, 3, Op::add, 4, 7)};
  CHECK(canonical_next_step(p, alt) == step(2, 1, Op::add, 2, 3));
  const auto full = oracle_solution(p).steps;
  CHECK_FALSE(canonical_next_step(p, full));
  const std::vector<Step> bad{step(1, 9, Op::add, 2, 11)};
  CHECK_FALSE(canonical_next_step(p, bad));
}

TEST_CASE("step bodies are cut verbatim") {
  const std::string text = "Step 1: 3+4 = 7. Step 2: 7 × 2=14. The final answer is 14.";
  const auto b = step_bodies(text);
  REQUIRE(b.size() == 2);
  CHECK(b[0] == " 3+4 = 7.");
  CHECK(b[1] == " 7 × 2=14.");
  CHECK(step(2, 8, Op::mul, 2, 16).compact_body() == " 8×2=16.");
  CHECK(step(2, 8, Op::mul, 2, 16).body() == " 8 × 2 = 16.");
}

TEST_CASE("prompt and prefix assembly") {
  const Problem p = problem_of("2+3×4");
  CHECK(p.prompt_text == "Solve 2+3×4.");
  CHECK(prompt_with_cot(p) == "Solve 2+3×4. Let's think step by step. Step 1:");
  const auto sol = oracle_solution(p);
  CHECK(completion_text(sol) == " 3 × 4 = 12. Step 2: 2 + 12 = 14. The final answer is 14.");
  CHECK(prefix_text(std::span<const Step>(sol.steps.data(), 1)) == " 3 × 4 = 12. Step 2:");
  CHECK(prefix_text({}).empty());
}

TEST_CASE("validation bucket holds about a tenth of the ids") {
  int val = 0;
  for (std::uint64_t id = 0; id < 1000; ++id) val += is_validation(id);
  // Binomial(1000, 0.1): mean 100, sd 9.5.
  CHECK(val > 70);
  CHECK(val < 130);
}

TEST_CASE("problem JSONL round-trips") {
  GenConfig cfg;
  const auto ps = gen_problems(5, 50, cfg);
  for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps[i].id == i);
  const std::string path = (std::filesystem::temp_directory_path() / "stepdpo_problems_test.jsonl").string();
  write_problems_jsonl(path, ps, true);
  const auto back = read_problems_jsonl(path);
  REQUIRE(back.size() == ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(back[i].id == ps[i].id);
    CHECK(back[i].expression == ps[i].expression);
    CHECK(back[i].ground_truth == ps[i].ground_truth);
  }
  std::filesystem::remove(path);
  try {
    read_problems_jsonl(path);
    FAIL("expected missing input");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_input);
  }
  CHECK_THROWS_AS(problem_from_json_line(R"({"id":1,"prompt_text":"Solve 2+2.","ground_truth":5})"), Error);
}
