#include "stepdpo/task.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <unordered_map>

#include <json.hpp>

#include "stepdpo/error.hpp"
#include "stepdpo/rng.hpp"

namespace stepdpo {

namespace {

constexpr std::string_view kFinalLead = "The final answer is ";
constexpr std::string_view kPromptLead = "Solve ";
constexpr int kMaxDigits = 12;

// Length in bytes of the UTF-8 sequence starting with byte c (0 if invalid lead).
int utf8_length(unsigned char c) {
  if (c < 0x80) return 1;
  if ((c & 0xE0) == 0xC0) return 2;
  if ((c & 0xF0) == 0xE0) return 3;
  if ((c & 0xF8) == 0xF0) return 4;
  return 0;
}

int precedence(Op op) { return (op == Op::add || op == Op::sub) ? 1 : 2; }

int decimal_digits(std::int64_t v) {
  int n = 1;
  while (v >= 10) {
    v /= 10;
    ++n;
  }
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab()
    : symbols_{" ", ".", ":", "=", "'", "0", "1", "2", "3", "4", "5", "6", "7", "8",
               "9", "+", "−", "×", "÷", "(", ")", "L", "S", "T", "a",
               "b", "e", "f", "h", "i", "k", "l", "n", "o", "p", "r", "s", "t",
               "v", "w", "y"} {}

const Vocab& Vocab::instance() {
  static const Vocab vocab;
  return vocab;
}

TokenSeq Vocab::encode(std::string_view text) const {
  static const std::unordered_map<std::string_view, Token> index = [this] {
    std::unordered_map<std::string_view, Token> m;
    for (std::size_t i = 0; i < symbols_.size(); ++i) m.emplace(symbols_[i], static_cast<Token>(i));
    return m;
  }();
  TokenSeq out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    const int len = utf8_length(static_cast<unsigned char>(text[pos]));
    auto it = (len == 0 || pos + len > text.size()) ? index.end()
                                                    : index.find(text.substr(pos, len));
    if (it == index.end()) {
      throw Error(ErrorKind::tokenize,
                  "unknown symbol at byte " + std::to_string(pos) + " in \"" + std::string(text) + "\"");
    }
    out.push_back(it->second);
    pos += len;
  }
  return out;
}

std::string Vocab::decode(std::span<const Token> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token t = tokens[i];
    if (t < 0 || t >= static_cast<Token>(symbols_.size())) {
      throw Error(ErrorKind::tokenize, "token id " + std::to_string(t) + " at position " +
                                           std::to_string(i) + " has no text form");
    }
    out += symbols_[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expressions

std::string_view op_symbol(Op op) {
  switch (op) {
    case Op::add: return "+";
    case Op::sub: return "−";
    case Op::mul: return "×";
    case Op::div: return "÷";
  }
  return "?";
}

std::optional<std::int64_t> apply_op(Op op, std::int64_t lhs, std::int64_t rhs) {
  switch (op) {
    case Op::add: return lhs + rhs;
    case Op::sub: return lhs - rhs;
    case Op::mul: return lhs * rhs;
    case Op::div:
      if (rhs == 0 || lhs % rhs != 0) return std::nullopt;
      return lhs / rhs;
  }
  return std::nullopt;
}

int Expr::num_ops() const {
  int n = 0;
  for (const auto& node : nodes) n += node.leaf ? 0 : 1;
  return n;
}

std::int64_t Expr::evaluate() const {
  std::vector<std::int64_t> values(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.leaf) {
      values[i] = n.value;
    } else {
      auto v = apply_op(n.op, values[n.left], values[n.right]);
      if (!v) throw Error(ErrorKind::argument, "expression contains an inexact division");
      values[i] = *v;
    }
  }
  return values.at(root);
}

std::string Expr::render() const {
  std::function<void(int, std::string&)> emit = [&](int idx, std::string& out) {
    const Node& n = nodes[idx];
    if (n.leaf) {
      out += std::to_string(n.value);
      return;
    }
    auto child = [&](int c, bool right) {
      const Node& cn = nodes[c];
      const bool parens = !cn.leaf && (precedence(cn.op) < precedence(n.op) ||
                                       (right && precedence(cn.op) == precedence(n.op)));
      if (parens) out += '(';
      emit(c, out);
      if (parens) out += ')';
    };
    child(n.left, false);
    out += op_symbol(n.op);
    child(n.right, true);
  };
  std::string out;
  emit(root, out);
  return out;
}

namespace {

class ExprParser {
 public:
  explicit ExprParser(std::string_view s) : s_(s) {}

  Expr parse() {
    Expr e;
    e.root = parse_sum(e);
    if (pos_ != s_.size()) fail();
    return e;
  }

 private:
  [[noreturn]] void fail() const {
    throw Error(ErrorKind::parse, "malformed expression at byte " + std::to_string(pos_) + ": \"" +
                                      std::string(s_) + "\"");
  }

  std::optional<Op> peek_op(int prec) {
    for (Op op : {Op::add, Op::sub, Op::mul, Op::div}) {
      if (precedence(op) != prec) continue;
      const auto sym = op_symbol(op);
      if (s_.substr(pos_, sym.size()) == sym) {
        pos_ += sym.size();
        return op;
      }
    }
    return std::nullopt;
  }

  int push(Expr& e, Expr::Node n) {
    e.nodes.push_back(n);
    return static_cast<int>(e.nodes.size()) - 1;
  }

  int parse_sum(Expr& e) {
    int lhs = parse_product(e);
    while (auto op = peek_op(1)) {
      int rhs = parse_product(e);
      lhs = push(e, {false, 0, *op, lhs, rhs});
    }
    return lhs;
  }

  int parse_product(Expr& e) {
    int lhs = parse_atom(e);
    while (auto op = peek_op(2)) {
      int rhs = parse_atom(e);
      lhs = push(e, {false, 0, *op, lhs, rhs});
    }
    return lhs;
  }

  int parse_atom(Expr& e) {
    if (pos_ < s_.size() && s_[pos_] == '(') {
      ++pos_;
      int inner = parse_sum(e);
      if (pos_ >= s_.size() || s_[pos_] != ')') fail();
      ++pos_;
      return inner;
    }
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
    if (ec != std::errc() || ptr == s_.data() + pos_) fail();
    pos_ = static_cast<std::size_t>(ptr - s_.data());
    return push(e, {true, v, Op::add, -1, -1});
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

Expr parse_expression(std::string_view text) { return ExprParser(text).parse(); }

// ---------------------------------------------------------------------------
// Generation

void GenConfig::validate() const {
  auto bad = [](const std::string& why) { throw Error(ErrorKind::config, "invalid generation config: " + why); };
  if (min_steps < 1) bad("min_steps must be >= 1");
  if (max_steps < min_steps) bad("max_steps must be >= min_steps");
  if (operand_max < 1) bad("operand_max must be >= 1");
  if (value_bound < operand_max) bad("value_bound must be >= operand_max");
  if (value_bound > 999'999'999) bad("value_bound too large");
  if (context_budget < 1) bad("context_budget must be positive");
  if (max_sequence_tokens() > context_budget) {
    bad("max_steps " + std::to_string(max_steps) + " needs up to " + std::to_string(max_sequence_tokens()) +
        " tokens, context budget is " + std::to_string(context_budget));
  }
}

int GenConfig::max_sequence_tokens() const {
  const int leaf = decimal_digits(operand_max);
  const int val = decimal_digits(value_bound);
  const int leaves = max_steps + 1;
  // Each operator contributes at most one pair of parentheses.
  const int expr = leaves * leaf + max_steps * 3;
  const int prompt = static_cast<int>(kPromptLead.size()) + expr + 1 + 1 +
                     static_cast<int>(Vocab::instance().encode(kCotPrefix).size());
  // " a op b = c." plus " Step i:" header per step
  const int idx = decimal_digits(max_steps);
  const int step = 1 + val + 3 + val + 3 + val + 1 + 6 + idx + 1;
  const int final_line = 1 + static_cast<int>(kFinalLead.size()) + val + 1;
  return prompt + max_steps * step + final_line + 1;
}

namespace {

// Random tree shape with n internal nodes in post-order.
int build_shape(Expr& e, int n_ops, Rng& rng) {
  if (n_ops == 0) {
    e.nodes.push_back({});
    return static_cast<int>(e.nodes.size()) - 1;
  }
  const int left_ops = static_cast<int>(rng.uniform_int(0, n_ops - 1));
  const int l = build_shape(e, left_ops, rng);
  const int r = build_shape(e, n_ops - 1 - left_ops, rng);
  e.nodes.push_back({false, 0, Op::add, l, r});
  return static_cast<int>(e.nodes.size()) - 1;
}

bool assign_values(Expr& e, const GenConfig& cfg, Rng& rng) {
  std::vector<std::int64_t> values(e.nodes.size());
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    auto& n = e.nodes[i];
    if (n.leaf) {
      n.value = rng.uniform_int(1, cfg.operand_max);
      values[i] = n.value;
      continue;
    }
    const std::int64_t l = values[n.left], r = values[n.right];
    Op feasible[4];
    int count = 0;
    for (Op op : {Op::add, Op::sub, Op::mul, Op::div}) {
      auto v = apply_op(op, l, r);
      if (v && *v >= 0 && *v <= cfg.value_bound) feasible[count++] = op;
    }
    if (count == 0) return false;
    n.op = feasible[rng.uniform_int(0, count - 1)];
    values[i] = *apply_op(n.op, l, r);
  }
  return true;
}

}  // namespace

Problem make_problem(std::uint64_t id, Expr expr) {
  Problem p;
  p.id = id;
  p.ground_truth = expr.evaluate();
  p.prompt_text = std::string(kPromptLead) + expr.render() + ".";
  p.expression = std::move(expr);
  return p;
}

Problem gen_problem(std::uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng rng(seed, 0x7A5C);
  constexpr int kAttempts = 10'000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const int n_ops = static_cast<int>(rng.uniform_int(cfg.min_steps, cfg.max_steps));
    Expr e;
    e.root = build_shape(e, n_ops, rng);
    if (assign_values(e, cfg, rng)) return make_problem(seed, std::move(e));
  }
  throw Error(ErrorKind::config, "generation config admits no problems within the value bound");
}

std::vector<Problem> gen_problems(std::uint64_t seed, std::size_t n, const GenConfig& cfg) {
  std::vector<Problem> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Problem p = gen_problem(derive_seed(seed, i), cfg);
    p.id = i;
    out.push_back(std::move(p));
  }
  return out;
}

bool is_validation(std::uint64_t problem_id) { return splitmix64(problem_id) % 10 == 0; }

// ---------------------------------------------------------------------------
// Steps

std::string Step::body() const {
  return " " + std::to_string(lhs) + " " + std::string(op_symbol(op)) + " " + std::to_string(rhs) + " = " +
         std::to_string(result) + ".";
}

std::string Step::compact_body() const {
  return " " + std::to_string(lhs) + std::string(op_symbol(op)) + std::to_string(rhs) + "=" +
         std::to_string(result) + ".";
}

std::string Step::text() const { return "Step " + std::to_string(index) + ":" + body(); }

std::string StepSolution::render() const {
  std::string out;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (i) out += ' ';
    out += steps[i].text();
  }
  if (final_answer) {
    if (!out.empty()) out += ' ';
    out += std::string(kFinalLead) + std::to_string(*final_answer) + ".";
  }
  return out;
}

namespace {

class SolutionScanner {
 public:
  explicit SolutionScanner(std::string_view s) : s_(s) {}

  bool at_end() const { return pos_ == s_.size(); }

  bool literal(std::string_view lit) {
    if (s_.substr(pos_, lit.size()) != lit) return false;
    pos_ += lit.size();
    return true;
  }

  void spaces() {
    while (pos_ < s_.size() && s_[pos_] == ' ') ++pos_;
  }

  std::optional<std::int64_t> number() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] >= '0' && s_[pos_] <= '9') ++pos_;
    const std::size_t len = pos_ - start;
    if (len == 0 || len > kMaxDigits || (len > 1 && s_[start] == '0')) return std::nullopt;
    std::int64_t v = 0;
    std::from_chars(s_.data() + start, s_.data() + pos_, v);
    return v;
  }

  std::optional<Op> op() {
    for (Op o : {Op::add, Op::sub, Op::mul, Op::div}) {
      if (literal(op_symbol(o))) return o;
    }
    return std::nullopt;
  }

  // "Step i:" header already consumed; parses " a op b = c."
  std::optional<Step> step_body(int index) {
    Step s;
    s.index = index;
    spaces();
    auto a = number();
    if (!a) return std::nullopt;
    spaces();
    auto o = op();
    if (!o) return std::nullopt;
    spaces();
    auto b = number();
    if (!b) return std::nullopt;
    spaces();
    if (!literal("=")) return std::nullopt;
    spaces();
    auto c = number();
    if (!c || !literal(".")) return std::nullopt;
    s.lhs = *a;
    s.op = *o;
    s.rhs = *b;
    s.result = *c;
    return s;
  }

  std::optional<int> header() {
    if (!literal("Step ")) return std::nullopt;
    auto idx = number();
    if (!idx || !literal(":")) return std::nullopt;
    return static_cast<int>(*idx);
  }

  std::size_t pos() const { return pos_; }
  void reset(std::size_t p) { pos_ = p; }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::optional<Step> try_parse_step(std::string_view text) {
  SolutionScanner sc(text);
  auto idx = sc.header();
  if (!idx) return std::nullopt;
  auto s = sc.step_body(*idx);
  if (!s || !sc.at_end()) return std::nullopt;
  return s;
}

std::optional<StepSolution> try_parse_solution(std::string_view text) {
  SolutionScanner sc(text);
  StepSolution sol;
  sol.source = SolutionSource::sampled;
  bool first = true;
  while (!sc.at_end()) {
    const std::size_t mark = sc.pos();
    if (!first) sc.spaces();
    if (sc.literal(kFinalLead)) {
      auto v = sc.number();
      if (!v || !sc.literal(".") || !sc.at_end()) return std::nullopt;
      sol.final_answer = *v;
      return sol;
    }
    sc.reset(mark);
    if (!first && !sc.literal(" ")) return std::nullopt;
    auto idx = sc.header();
    const int expected = static_cast<int>(sol.steps.size()) + 1;
    if (!idx || *idx != expected) return std::nullopt;
    auto step = sc.step_body(expected);
    if (!step) return std::nullopt;
    sol.steps.push_back(*step);
    first = false;
  }
  return sol;
}

StepSolution parse_solution(std::string_view text) {
  auto sol = try_parse_solution(text);
  if (!sol) throw Error(ErrorKind::parse, "malformed solution text: \"" + std::string(text) + "\"");
  return *sol;
}

StepSolution oracle_solution(const Problem& p) {
  const Expr& e = p.expression;
  std::vector<std::int64_t> values(e.nodes.size());
  StepSolution sol;
  sol.source = SolutionSource::oracle;
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    const auto& n = e.nodes[i];
    if (n.leaf) {
      values[i] = n.value;
      continue;
    }
    Step s;
    s.index = static_cast<int>(sol.steps.size()) + 1;
    s.lhs = values[n.left];
    s.op = n.op;
    s.rhs = values[n.right];
    s.result = *apply_op(n.op, s.lhs, s.rhs);
    values[i] = s.result;
    sol.steps.push_back(s);
  }
  sol.final_answer = values.at(e.root);
  return sol;
}

Verdict verify_step(const Step& s) {
  auto v = apply_op(s.op, s.lhs, s.rhs);
  return (v && *v == s.result) ? Verdict::valid : Verdict::invalid;
}

Localization localize_first_error(const StepSolution& sol, const Problem& p) {
  const Expr& e = p.expression;
  // Known values of the current expression state; internal nodes start unknown.
  std::vector<std::optional<std::int64_t>> state(e.nodes.size());
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    if (e.nodes[i].leaf) state[i] = e.nodes[i].value;
  }
  for (std::size_t k = 0; k < sol.steps.size(); ++k) {
    const Step& s = sol.steps[k];
    const int step_no = static_cast<int>(k) + 1;
    if (verify_step(s) == Verdict::invalid) return {Localization::Kind::first_error, step_no};
    int match = -1;
    for (std::size_t i = 0; i < e.nodes.size() && match < 0; ++i) {
      const auto& n = e.nodes[i];
      if (n.leaf || state[i] || !state[n.left] || !state[n.right]) continue;
      if (n.op == s.op && *state[n.left] == s.lhs && *state[n.right] == s.rhs) match = static_cast<int>(i);
    }
    if (match < 0) return {Localization::Kind::first_error, step_no};
    state[match] = s.result;
  }
  if (sol.final_answer && *sol.final_answer == p.ground_truth) return {Localization::Kind::correct, 0};
  return {Localization::Kind::unlocatable, static_cast<int>(sol.steps.size()) + 1};
}

std::optional<Localization> localize_first_error(std::string_view solution_text, const Problem& p) {
  auto sol = try_parse_solution(solution_text);
  if (!sol) return std::nullopt;
  return localize_first_error(*sol, p);
}

Verdict verify_step_in_context(const Problem& p, std::span<const Step> prefix, const Step& step) {
  StepSolution sol;
  sol.steps.assign(prefix.begin(), prefix.end());
  sol.steps.push_back(step);
  const auto loc = localize_first_error(sol, p);
  return loc.kind == Localization::Kind::first_error ? Verdict::invalid : Verdict::valid;
}

std::optional<Step> canonical_next_step(const Problem& p, std::span<const Step> prefix) {
  StepSolution sol;
  sol.steps.assign(prefix.begin(), prefix.end());
  if (localize_first_error(sol, p).kind == Localization::Kind::first_error) return std::nullopt;
  // Replay the prefix; nodes are stored in post-order, so the first ready
  // node is the leftmost one.
  const Expr& e = p.expression;
  std::vector<std::optional<std::int64_t>> state(e.nodes.size());
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    if (e.nodes[i].leaf) state[i] = e.nodes[i].value;
  }
  auto ready = [&](std::size_t i) {
    const auto& n = e.nodes[i];
    return !n.leaf && !state[i] && state[n.left] && state[n.right];
  };
  for (const Step& s : prefix) {
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
      const auto& n = e.nodes[i];
      if (ready(i) && n.op == s.op && *state[n.left] == s.lhs && *state[n.right] == s.rhs) {
        state[i] = s.result;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    if (!ready(i)) continue;
    const auto& n = e.nodes[i];
    Step s;
    s.index = static_cast<int>(prefix.size()) + 1;
    s.lhs = *state[n.left];
    s.op = n.op;
    s.rhs = *state[n.right];
    s.result = *apply_op(n.op, s.lhs, s.rhs);
    return s;
  }
  return std::nullopt;
}

std::vector<std::string_view> step_bodies(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while ((pos = text.find("Step ", pos)) != std::string_view::npos) {
    std::size_t q = pos + 5;
    while (q < text.size() && text[q] >= '0' && text[q] <= '9') ++q;
    if (q == pos + 5 || q >= text.size() || text[q] != ':') {
      pos = q;
      continue;
    }
    const std::size_t start = q + 1;
    const std::size_t dot = text.find('.', start);
    if (dot == std::string_view::npos) break;
    out.push_back(text.substr(start, dot + 1 - start));
    pos = dot + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt assembly

std::string prompt_with_cot(const Problem& p) { return p.prompt_text + " " + std::string(kCotPrefix); }

std::string completion_text(const StepSolution& sol) {
  const std::string full = sol.render();
  constexpr std::string_view lead = "Step 1:";
  if (!sol.steps.empty()) return full.substr(lead.size());
  return " " + full;
}

std::optional<StepSolution> parse_completion(std::string_view completion) {
  std::string text = "Step 1:";
  text += completion;
  return try_parse_solution(text);
}

std::string prefix_text(std::span<const Step> prefix_steps) {
  std::string out;
  for (std::size_t i = 0; i < prefix_steps.size(); ++i) {
    out += prefix_steps[i].body();
    out += " Step " + std::to_string(i + 2) + ":";
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string problem_to_json_line(const Problem& p, const std::optional<std::string>& solution_text) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["prompt_text"] = p.prompt_text;
  j["ground_truth"] = p.ground_truth;
  if (solution_text) j["solution_text"] = *solution_text;
  return j.dump();
}

Problem problem_from_json_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::parse, std::string("problem JSONL: ") + ex.what());
  }
  const std::string prompt = j.at("prompt_text").get<std::string>();
  if (prompt.size() < kPromptLead.size() + 1 || prompt.rfind(kPromptLead, 0) != 0 || prompt.back() != '.') {
    throw Error(ErrorKind::parse, "problem JSONL: unexpected prompt_text \"" + prompt + "\"");
  }
  Expr e = parse_expression(std::string_view(prompt).substr(kPromptLead.size(),
                                                            prompt.size() - kPromptLead.size() - 1));
  Problem p = make_problem(j.at("id").get<std::uint64_t>(), std::move(e));
  if (p.ground_truth != j.at("ground_truth").get<std::int64_t>()) {
    throw Error(ErrorKind::parse, "problem JSONL: ground_truth disagrees with expression for id " +
                                      std::to_string(p.id));
  }
  return p;
}

void write_problems_jsonl(const std::string& path, std::span<const Problem> problems, bool with_solutions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  for (const auto& p : problems) {
    std::optional<std::string> sol;
    if (with_solutions) sol = oracle_solution(p).render();
    out << problem_to_json_line(p, sol) << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

std::vector<Problem> read_problems_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot read " + path);
  std::vector<Problem> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(problem_from_json_line(line));
  }
  return out;
}

}  // namespace stepdpo
