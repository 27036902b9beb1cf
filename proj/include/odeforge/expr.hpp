#pragma once
#include <algorithm>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odeforge/common.hpp"
#include "odeforge/grammar.hpp"

namespace odeforge {

enum class NodeKind {
  Add,
  Sub,
  Mul,
  Div,
  Pow,
  Neg,
  Sin,
  Cos,
  Exp,
  Log,
  VarT,
  VarU,
  VarDu,   // u'
  VarDdu,  // u''
  Const,   // fitted placeholder, identified by slot
  Literal,
};

inline bool is_binary(NodeKind k) {
  return k == NodeKind::Add || k == NodeKind::Sub || k == NodeKind::Mul ||
         k == NodeKind::Div || k == NodeKind::Pow;
}
inline bool is_unary(NodeKind k) {
  return k == NodeKind::Neg || k == NodeKind::Sin || k == NodeKind::Cos ||
         k == NodeKind::Exp || k == NodeKind::Log;
}
inline bool is_leaf(NodeKind k) { return !is_binary(k) && !is_unary(k); }

/// Expression tree with value semantics. Constant placeholders carry slot
/// indices that are contiguous in left-to-right (in-order) traversal.
struct Expression {
  NodeKind kind = NodeKind::Literal;
  int slot = -1;        // Const only
  double literal = 0.0; // Literal only
  std::vector<Expression> children;

  static Expression leaf(NodeKind k) { return Expression{k, -1, 0.0, {}}; }
  static Expression constant(int slot) { return Expression{NodeKind::Const, slot, 0.0, {}}; }
  static Expression number(double v) { return Expression{NodeKind::Literal, -1, v, {}}; }
  static Expression unary(NodeKind k, Expression a) {
    Expression e{k, -1, 0.0, {}};
    e.children.push_back(std::move(a));
    return e;
  }
  static Expression binary(NodeKind k, Expression a, Expression b) {
    Expression e{k, -1, 0.0, {}};
    e.children.push_back(std::move(a));
    e.children.push_back(std::move(b));
    return e;
  }
};

/// Variable bindings for one evaluation point.
struct EvalPoint {
  double t = 0.0;
  double u = 0.0;
  double du = 0.0;
  double ddu = 0.0;
};

/// Plain IEEE-754 evaluation; pathologies (division by zero, log of a
/// non-positive value, pow overflow) surface as non-finite values that the
/// caller clips or converts into a sentinel loss.
inline double evaluate(const Expression& e, const EvalPoint& p,
                       const std::vector<double>& constants) {
  switch (e.kind) {
    case NodeKind::Add: return evaluate(e.children[0], p, constants) + evaluate(e.children[1], p, constants);
    case NodeKind::Sub: return evaluate(e.children[0], p, constants) - evaluate(e.children[1], p, constants);
    case NodeKind::Mul: return evaluate(e.children[0], p, constants) * evaluate(e.children[1], p, constants);
    case NodeKind::Div: return evaluate(e.children[0], p, constants) / evaluate(e.children[1], p, constants);
    case NodeKind::Pow: return std::pow(evaluate(e.children[0], p, constants), evaluate(e.children[1], p, constants));
    case NodeKind::Neg: return -evaluate(e.children[0], p, constants);
    case NodeKind::Sin: return std::sin(evaluate(e.children[0], p, constants));
    case NodeKind::Cos: return std::cos(evaluate(e.children[0], p, constants));
    case NodeKind::Exp: return std::exp(evaluate(e.children[0], p, constants));
    case NodeKind::Log: return std::log(evaluate(e.children[0], p, constants));
    case NodeKind::VarT: return p.t;
    case NodeKind::VarU: return p.u;
    case NodeKind::VarDu: return p.du;
    case NodeKind::VarDdu: return p.ddu;
    case NodeKind::Const:
      if (e.slot < 0 || e.slot >= static_cast<int>(constants.size()))
        throw ShapeError("evaluate: constant slot " + std::to_string(e.slot) + " unbound");
      return constants[e.slot];
    case NodeKind::Literal: return e.literal;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

/// Highest derivative order appearing in the expression (0 if none).
inline int order_of(const Expression& e) {
  int o = 0;
  if (e.kind == NodeKind::VarDu) o = 1;
  if (e.kind == NodeKind::VarDdu) o = 2;
  for (const auto& c : e.children) o = std::max(o, order_of(c));
  return o;
}

inline bool contains_kind(const Expression& e, NodeKind k) {
  if (e.kind == k) return true;
  for (const auto& c : e.children)
    if (contains_kind(c, k)) return true;
  return false;
}

/// Number of constant slots (assumes contiguous numbering).
inline int num_slots(const Expression& e) {
  int m = e.kind == NodeKind::Const ? e.slot + 1 : 0;
  for (const auto& c : e.children) m = std::max(m, num_slots(c));
  return m;
}

/// Node count: every operation, variable and constant (placeholder or
/// literal) contributes one; grouping contributes nothing.
inline int complexity(const Expression& e) {
  int n = 1;
  for (const auto& c : e.children) n += complexity(c);
  return n;
}

// ---------------------------------------------------------------------------
// Infix parsing (independent of any grammar; used for problem definitions
// and for turning realized skeleton strings into evaluable trees).
// ---------------------------------------------------------------------------

namespace exprdetail {

struct Lexer {
  std::vector<std::string> tokens;
  std::vector<double> numbers;  // literal value per numeric token, by order
  std::size_t pos = 0;

  static Lexer scan(const std::string& text) {
    Lexer lx;
    std::size_t i = 0;
    auto word_char = [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '\'';
    };
    while (i < text.size()) {
      char c = text[i];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
        continue;
      }
      if (std::isdigit(static_cast<unsigned char>(c)) ||
          (c == '.' && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
        std::size_t j = i;
        while (j < text.size() && (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.')) ++j;
        if (j < text.size() && (text[j] == 'e' || text[j] == 'E')) {
          std::size_t k = j + 1;
          if (k < text.size() && (text[k] == '+' || text[k] == '-')) ++k;
          if (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) {
            while (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) ++k;
            j = k;
          }
        }
        lx.numbers.push_back(std::stod(text.substr(i, j - i)));
        lx.tokens.push_back("#num");
        i = j;
        continue;
      }
      if (std::isalpha(static_cast<unsigned char>(c))) {
        std::size_t j = i;
        while (j < text.size() && word_char(text[j])) ++j;
        lx.tokens.push_back(text.substr(i, j - i));
        i = j;
        continue;
      }
      lx.tokens.push_back(std::string(1, c));
      ++i;
    }
    return lx;
  }

  bool done() const { return pos >= tokens.size(); }
  const std::string& peek() const {
    static const std::string kEnd = "";
    return done() ? kEnd : tokens[pos];
  }
  std::string next() {
    if (done()) throw ParseError("expression: unexpected end of input");
    return tokens[pos++];
  }
  void expect(const std::string& t) {
    if (done() || tokens[pos] != t)
      throw ParseError("expression: expected '" + t + "' near token " + std::to_string(pos));
    ++pos;
  }
};

struct InfixParser {
  Lexer lx;
  bool abstract_numbers = false;
  int next_slot = 0;
  std::size_t num_index = 0;
  std::vector<double> extracted;

  Expression parse_expr() {
    Expression lhs = parse_term();
    while (!lx.done() && (lx.peek() == "+" || lx.peek() == "-")) {
      std::string op = lx.next();
      Expression rhs = parse_term();
      lhs = Expression::binary(op == "+" ? NodeKind::Add : NodeKind::Sub, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  Expression parse_term() {
    Expression lhs = parse_unary();
    while (!lx.done() && (lx.peek() == "*" || lx.peek() == "/")) {
      std::string op = lx.next();
      Expression rhs = parse_unary();
      lhs = Expression::binary(op == "*" ? NodeKind::Mul : NodeKind::Div, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  Expression parse_unary() {
    if (!lx.done() && lx.peek() == "-") {
      lx.next();
      return Expression::unary(NodeKind::Neg, parse_unary());
    }
    return parse_power();
  }

  Expression parse_power() {
    Expression base = parse_atom();
    if (!lx.done() && lx.peek() == "^") {
      lx.next();
      Expression exp = parse_unary();  // right associative
      return Expression::binary(NodeKind::Pow, std::move(base), std::move(exp));
    }
    return base;
  }

  Expression parse_atom() {
    std::string t = lx.next();
    if (t == "#num") {
      double v = lx.numbers[num_index++];
      if (abstract_numbers) {
        extracted.push_back(v);
        return Expression::constant(next_slot++);
      }
      return Expression::number(v);
    }
    if (t == "C") return Expression::constant(next_slot++);
    if (t.size() > 1 && t[0] == 'C' &&
        std::all_of(t.begin() + 1, t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      int slot = std::stoi(t.substr(1));
      next_slot = std::max(next_slot, slot + 1);
      return Expression::constant(slot);
    }
    if (t == "t") return Expression::leaf(NodeKind::VarT);
    if (t == "u") return Expression::leaf(NodeKind::VarU);
    if (t == "u'") return Expression::leaf(NodeKind::VarDu);
    if (t == "u''") return Expression::leaf(NodeKind::VarDdu);
    if (t == "sin" || t == "cos" || t == "exp" || t == "log") {
      lx.expect("(");
      Expression arg = parse_expr();
      lx.expect(")");
      NodeKind k = t == "sin"   ? NodeKind::Sin
                   : t == "cos" ? NodeKind::Cos
                   : t == "exp" ? NodeKind::Exp
                                : NodeKind::Log;
      return Expression::unary(k, std::move(arg));
    }
    if (t == "(") {
      Expression inner = parse_expr();
      lx.expect(")");
      return inner;
    }
    throw ParseError("expression: unexpected token '" + t + "'");
  }
};

}  // namespace exprdetail

struct ParsedExpression {
  Expression expr;
  int n_constants = 0;
  std::vector<double> extracted;  // literal values, when abstracting
};

/// Parse infix text over {t, u, u', u'', C, sin, cos, exp, log, + - * / ^}.
/// With abstract_numbers, numeric literals become constant slots and their
/// values are reported in `extracted`.
inline ParsedExpression parse_expression(const std::string& text, bool abstract_numbers = false) {
  exprdetail::InfixParser p{exprdetail::Lexer::scan(text), abstract_numbers};
  Expression e = p.parse_expr();
  if (!p.lx.done())
    throw ParseError("expression: trailing input starting at '" + p.lx.peek() + "'");
  return ParsedExpression{std::move(e), p.next_slot, std::move(p.extracted)};
}

/// Canonical serialization: fully parenthesized infix with C{k} slots.
inline std::string to_string(const Expression& e, const std::vector<double>* constants = nullptr) {
  auto bin = [&](const char* op) {
    return "(" + to_string(e.children[0], constants) + op + to_string(e.children[1], constants) + ")";
  };
  switch (e.kind) {
    case NodeKind::Add: return bin("+");
    case NodeKind::Sub: return bin("-");
    case NodeKind::Mul: return bin("*");
    case NodeKind::Div: return bin("/");
    case NodeKind::Pow: return bin("^");
    case NodeKind::Neg: return "(-" + to_string(e.children[0], constants) + ")";
    case NodeKind::Sin: return "sin(" + to_string(e.children[0], constants) + ")";
    case NodeKind::Cos: return "cos(" + to_string(e.children[0], constants) + ")";
    case NodeKind::Exp: return "exp(" + to_string(e.children[0], constants) + ")";
    case NodeKind::Log: return "log(" + to_string(e.children[0], constants) + ")";
    case NodeKind::VarT: return "t";
    case NodeKind::VarU: return "u";
    case NodeKind::VarDu: return "u'";
    case NodeKind::VarDdu: return "u''";
    case NodeKind::Const:
      if (constants && e.slot >= 0 && e.slot < static_cast<int>(constants->size()))
        return format_double((*constants)[e.slot]);
      return "C" + std::to_string(e.slot);
    case NodeKind::Literal: return format_double(e.literal);
  }
  return "?";
}

/// Candidate ODE in implicit form: operator(u, t) - input(t) = 0.
struct ODECandidate {
  Expression op;                       // differential operator D(u(t))
  std::optional<Expression> input;     // forcing term F(t); nullopt = 0
  int order = 0;
  std::vector<double> constants;       // fitted values, one per slot
  RuleSequence skeleton;               // derivation that produced `op`

  int n_constants() const { return static_cast<int>(constants.size()); }
};

inline ODECandidate make_candidate(Expression op, std::optional<Expression> input,
                                   std::vector<double> constants, RuleSequence skeleton = {}) {
  ODECandidate c;
  c.order = order_of(op);
  c.op = std::move(op);
  c.input = std::move(input);
  c.constants = std::move(constants);
  c.skeleton = std::move(skeleton);
  return c;
}

inline int complexity(const ODECandidate& c) {
  return complexity(c.op) + (c.input ? complexity(*c.input) : 0);
}

inline double evaluate_residual(const ODECandidate& c, const EvalPoint& p) {
  double d = evaluate(c.op, p, c.constants);
  double f = c.input ? evaluate(*c.input, p, c.constants) : 0.0;
  return d - f;
}

// ---------------------------------------------------------------------------
// Post-fit simplification
// ---------------------------------------------------------------------------

namespace exprdetail {

struct SignedTerm {
  int sign = +1;
  Expression expr;
};

inline void flatten_sum(const Expression& e, int sign, std::vector<SignedTerm>& out) {
  if (e.kind == NodeKind::Add) {
    flatten_sum(e.children[0], sign, out);
    flatten_sum(e.children[1], sign, out);
  } else if (e.kind == NodeKind::Sub) {
    flatten_sum(e.children[0], sign, out);
    flatten_sum(e.children[1], -sign, out);
  } else if (e.kind == NodeKind::Neg) {
    flatten_sum(e.children[0], -sign, out);
  } else {
    out.push_back(SignedTerm{sign, e});
  }
}

inline void flatten_product(const Expression& e, std::vector<Expression>& out) {
  if (e.kind == NodeKind::Mul) {
    flatten_product(e.children[0], out);
    flatten_product(e.children[1], out);
  } else {
    out.push_back(e);
  }
}

inline void collect_constant_values(const Expression& e, const std::vector<double>& constants,
                                    std::vector<double>& out, bool* any_slot) {
  if (e.kind == NodeKind::Const) {
    out.push_back(constants.at(e.slot));
    *any_slot = true;
  }
  for (const auto& c : e.children) collect_constant_values(c, constants, out, any_slot);
}

inline Expression rebuild_sum(const std::vector<SignedTerm>& terms) {
  Expression acc = terms.front().sign > 0
                       ? terms.front().expr
                       : Expression::unary(NodeKind::Neg, terms.front().expr);
  for (std::size_t i = 1; i < terms.size(); ++i) {
    acc = Expression::binary(terms[i].sign > 0 ? NodeKind::Add : NodeKind::Sub,
                             std::move(acc), terms[i].expr);
  }
  return acc;
}

inline Expression rebuild_product(const std::vector<Expression>& factors) {
  Expression acc = factors.front();
  for (std::size_t i = 1; i < factors.size(); ++i)
    acc = Expression::binary(NodeKind::Mul, std::move(acc), factors[i]);
  return acc;
}

inline void renumber_slots(Expression& e, std::map<int, int>& remap, int& next) {
  if (e.kind == NodeKind::Const) {
    auto it = remap.find(e.slot);
    if (it == remap.end()) it = remap.emplace(e.slot, next++).first;
    e.slot = it->second;
  }
  for (auto& c : e.children) renumber_slots(c, remap, next);
}

}  // namespace exprdetail

/// Term elimination after constant fitting. A top-level additive term of
/// the operator is dropped when the squared sum of its fitted constants is
/// below eps_sum (terms without constants are never dropped: their size is
/// not controlled by any fitted value). With drop_factors, a pure-constant
/// multiplicative factor whose summed absolute deviation from 1 is below
/// eps_mul is removed, provided a non-constant factor remains. Constant
/// slots are renumbered contiguously afterwards.
inline ODECandidate simplify(const ODECandidate& cand, double eps_sum, double eps_mul,
                             bool drop_factors = true) {
  using namespace exprdetail;
  std::vector<SignedTerm> terms;
  flatten_sum(cand.op, +1, terms);

  // Factor elimination runs before term elimination; the reverse order
  // would not be idempotent (dropping a near-one factor can shrink the
  // term's constant set below the summation threshold).
  if (drop_factors) {
    for (auto& term : terms) {
      std::vector<Expression> factors;
      flatten_product(term.expr, factors);
      if (factors.size() < 2) continue;
      bool has_nonconstant = false;
      for (const auto& f : factors)
        if (f.kind != NodeKind::Const && f.kind != NodeKind::Literal) has_nonconstant = true;
      if (!has_nonconstant) continue;
      std::vector<Expression> surviving;
      for (const auto& f : factors) {
        if (f.kind == NodeKind::Const || f.kind == NodeKind::Literal) {
          double v = f.kind == NodeKind::Const ? cand.constants.at(f.slot) : f.literal;
          if (std::abs(v - 1.0) < eps_mul) continue;
        }
        surviving.push_back(f);
      }
      if (surviving.empty()) continue;
      term.expr = rebuild_product(surviving);
    }
  }

  std::vector<SignedTerm> kept;
  for (const auto& term : terms) {
    std::vector<double> values;
    bool any_slot = false;
    collect_constant_values(term.expr, cand.constants, values, &any_slot);
    if (any_slot) {
      double sq = 0;
      for (double v : values) sq += v * v;
      if (sq < eps_sum) continue;
    }
    kept.push_back(term);
  }
  if (kept.empty()) throw EmptyOperator("simplify: every operator term was eliminated");

  ODECandidate out;
  out.op = rebuild_sum(kept);
  out.input = cand.input;
  out.order = order_of(out.op);
  out.skeleton = cand.skeleton;

  std::map<int, int> remap;
  int next = 0;
  renumber_slots(out.op, remap, next);
  if (out.input) renumber_slots(*out.input, remap, next);
  out.constants.resize(next);
  for (const auto& [old_slot, new_slot] : remap)
    out.constants[new_slot] = cand.constants.at(old_slot);
  return out;
}

}  // namespace odeforge
