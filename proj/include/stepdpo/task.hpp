#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stepdpo {

// ---------------------------------------------------------------------------
// Vocabulary and character-level tokenization
// ---------------------------------------------------------------------------

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

/// Fixed, ordered symbol table. Every symbol is one Unicode code point
/// (stored as UTF-8); the end-of-sequence token has no text form and is the
/// last id.
class Vocab {
 public:
  static const Vocab& instance();

  int size() const { return static_cast<int>(symbols_.size()) + 1; }
  Token eos() const { return static_cast<Token>(symbols_.size()); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  /// Throws Error(tokenize) naming the byte offset of the first symbol
  /// outside the table.
  TokenSeq encode(std::string_view text) const;
  /// Throws Error(tokenize) for ids out of range or for the eos token.
  std::string decode(std::span<const Token> tokens) const;

 private:
  Vocab();
  std::vector<std::string> symbols_;
};

inline TokenSeq tokenize(std::string_view text) { return Vocab::instance().encode(text); }
inline std::string detokenize(std::span<const Token> tokens) { return Vocab::instance().decode(tokens); }

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

enum class Op : std::uint8_t { add, sub, mul, div };

/// Rendered operator symbol (U+002B, U+2212, U+00D7, U+00F7).
std::string_view op_symbol(Op op);
/// Exact integer application; nullopt for zero divisors or inexact division.
std::optional<std::int64_t> apply_op(Op op, std::int64_t lhs, std::int64_t rhs);

/// Binary expression tree in a flat node array (children precede parents).
struct Expr {
  struct Node {
    bool leaf = true;
    std::int64_t value = 0;  // leaf literal
    Op op = Op::add;
    int left = -1;
    int right = -1;

    friend bool operator==(const Node&, const Node&) = default;
  };
  std::vector<Node> nodes;
  int root = -1;

  int num_ops() const;
  std::int64_t evaluate() const;
  /// Minimal-parenthesis infix rendering without spaces. A right operand of
  /// equal precedence is always parenthesized so the tree is recoverable.
  std::string render() const;

  friend bool operator==(const Expr&, const Expr&) = default;
};

struct Problem {
  std::uint64_t id = 0;
  Expr expression;
  std::string prompt_text;
  std::int64_t ground_truth = 0;
};

struct GenConfig {
  int min_steps = 2;
  int max_steps = 4;
  std::int64_t operand_max = 9;    // leaves drawn from [1, operand_max]
  std::int64_t value_bound = 99;   // every node value lies in [0, value_bound]
  int context_budget = 256;        // worst-case prompt + solution tokens

  /// Throws Error(config) when the bounds make generation impossible.
  void validate() const;
  /// Upper bound on prompt + CoT prefix + rendered solution + eos tokens.
  int max_sequence_tokens() const;

  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

/// The verbatim chain-of-thought suffix appended to every prompt.
inline constexpr std::string_view kCotPrefix = "Let's think step by step. Step 1:";

/// Deterministic in (seed, cfg). The returned problem's id is the seed.
Problem gen_problem(std::uint64_t seed, const GenConfig& cfg);
/// n problems with ids 0..n-1, problem i generated from derive_seed(seed, i).
std::vector<Problem> gen_problems(std::uint64_t seed, std::size_t n, const GenConfig& cfg);
/// Build a problem around an explicit expression (ids and prompts as gen_problem).
Problem make_problem(std::uint64_t id, Expr expr);

/// Validation bucket: splitmix64(id) mod 10 == 0.
bool is_validation(std::uint64_t problem_id);

// ---------------------------------------------------------------------------
// Steps and solutions
// ---------------------------------------------------------------------------

struct Step {
  int index = 1;
  std::int64_t lhs = 0;
  Op op = Op::add;
  std::int64_t rhs = 0;
  std::int64_t result = 0;

  /// "Step i: lhs op rhs = result."
  std::string text() const;
  /// The part after "Step i:", i.e. " lhs op rhs = result."
  std::string body() const;
  /// Alternate surface form used for out-of-distribution corrections:
  /// " lhs op rhs=result." without spaces around operators or '='.
  std::string compact_body() const;

  friend bool operator==(const Step&, const Step&) = default;
};

enum class SolutionSource : std::uint8_t { oracle, sampled };

struct StepSolution {
  std::vector<Step> steps;
  std::optional<std::int64_t> final_answer;
  SolutionSource source = SolutionSource::sampled;

  /// Steps joined by single spaces, then " The final answer is N." when the
  /// final answer is present.
  std::string render() const;

  friend bool operator==(const StepSolution&, const StepSolution&) = default;
};

/// Parses "Step i: a op b = c." units followed by an optional
/// "The final answer is N." line. Spacing around operators and '=' is
/// optional. Indices must run 1..n. Returns nullopt on any other text.
std::optional<StepSolution> try_parse_solution(std::string_view text);
/// As try_parse_solution but throws Error(parse).
StepSolution parse_solution(std::string_view text);
std::optional<Step> try_parse_step(std::string_view text);

/// Post-order (left, right, node) evaluation of the expression.
StepSolution oracle_solution(const Problem& p);

enum class Verdict : std::uint8_t { valid, invalid };
Verdict verify_step(const Step& s);

struct Localization {
  enum class Kind : std::uint8_t { correct, first_error, unlocatable };
  Kind kind = Kind::correct;
  /// 1-based index of the first bad step (first_error) or n+1 (unlocatable).
  int k = 0;

  std::optional<int> step() const {
    return kind == Kind::first_error ? std::optional<int>(k) : std::nullopt;
  }
};

/// Smallest k whose step is arithmetically invalid or whose operands are not
/// a reducible node of the expression state left by steps 1..k-1.
Localization localize_first_error(const StepSolution& sol, const Problem& p);

/// Text-level entry point; nullopt is the parse-error record.
std::optional<Localization> localize_first_error(std::string_view solution_text, const Problem& p);

/// Arithmetic validity plus operand justification of `step` against the
/// expression state left by `prefix`. Invalid if the prefix itself is.
Verdict verify_step_in_context(const Problem& p, std::span<const Step> prefix, const Step& step);

/// The leftmost reducible node after `prefix`, as step prefix.size()+1.
/// nullopt if the prefix is invalid or the expression is fully reduced.
std::optional<Step> canonical_next_step(const Problem& p, std::span<const Step> prefix);

/// Verbatim text after each "Step i:" header up to and including its '.'.
std::vector<std::string_view> step_bodies(std::string_view solution_text);

// ---------------------------------------------------------------------------
// Prompt / completion assembly
// ---------------------------------------------------------------------------

/// prompt_text + " " + kCotPrefix
std::string prompt_with_cot(const Problem& p);
/// The model's expected completion for a solution: the rendered solution
/// with the leading "Step 1:" removed (it is part of the prompt).
std::string completion_text(const StepSolution& sol);
/// Inverse of completion_text: reattaches "Step 1:" and parses.
std::optional<StepSolution> parse_completion(std::string_view completion);

/// Text that follows the CoT prefix up to and including "Step k:": the
/// bodies of steps 1..k-1 each followed by the next step header. Empty for k=1.
std::string prefix_text(std::span<const Step> prefix_steps);

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

/// {"id","prompt_text","ground_truth","expression"[, "solution_text"]}
std::string problem_to_json_line(const Problem& p, const std::optional<std::string>& solution_text = {});
Problem problem_from_json_line(std::string_view line);
/// Parses the expression as rendered by Expr::render.
Expr parse_expression(std::string_view text);

void write_problems_jsonl(const std::string& path, std::span<const Problem> problems, bool with_solutions);
std::vector<Problem> read_problems_jsonl(const std::string& path);

}  // namespace stepdpo
