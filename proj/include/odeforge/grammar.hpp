#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "odeforge/common.hpp"

namespace odeforge {

struct ProductionRule {
  std::string lhs;
  std::vector<std::string> rhs;  // empty only for the padding rule
  bool is_padding = false;
};

/// Context-free grammar over whitespace-free token strings. Rule order is
/// the on-disk order, which fixes the one-hot column indexing across runs.
class Grammar {
 public:
  /// File format: one rule per line, `LHS -> RHS1 RHS2 ...`, tokens
  /// whitespace separated, `#` starts a comment line. The reserved token
  /// PAD as the sole RHS declares the padding rule. The first rule's LHS
  /// is the start symbol.
  static Grammar from_string(const std::string& text, bool declared_unambiguous = true) {
    Grammar g;
    g.declared_unambiguous_ = declared_unambiguous;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::vector<std::string> tokens;
      std::string tok;
      while (ls >> tok) tokens.push_back(tok);
      if (tokens.empty()) continue;
      if (tokens.size() < 3 || tokens[1] != "->")
        throw ParseError("grammar: malformed rule line: " + line);
      ProductionRule rule;
      rule.lhs = tokens[0];
      if (tokens.size() == 3 && tokens[2] == "PAD") {
        rule.is_padding = true;
      } else {
        rule.rhs.assign(tokens.begin() + 2, tokens.end());
      }
      g.rules_.push_back(std::move(rule));
    }
    if (g.rules_.empty()) throw ParseError("grammar: no rules");
    g.finalize();
    return g;
  }

  static Grammar from_file(const std::string& path, bool declared_unambiguous = true) {
    std::ifstream in(path);
    if (!in) throw IoError("grammar: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str(), declared_unambiguous);
  }

  int num_rules() const { return static_cast<int>(rules_.size()); }
  const ProductionRule& rule(int i) const { return rules_.at(i); }
  const std::vector<ProductionRule>& rules() const { return rules_; }
  const std::string& start() const { return start_; }
  int padding_rule_index() const { return padding_rule_; }
  bool declared_unambiguous() const { return declared_unambiguous_; }

  bool is_nonterminal(const std::string& sym) const {
    return nonterminals_.count(sym) > 0;
  }
  const std::set<std::string>& nonterminals() const { return nonterminals_; }
  const std::set<std::string>& terminals() const { return terminals_; }

  /// Indices of non-padding rules with the given left-hand side.
  const std::vector<int>& rules_for(const std::string& nt) const {
    auto it = by_lhs_.find(nt);
    if (it == by_lhs_.end()) throw ParseError("grammar: unknown nonterminal " + nt);
    return it->second;
  }

  /// Minimum number of terminals derivable from a symbol.
  int min_yield(const std::string& sym) const {
    auto it = min_yield_.find(sym);
    return it == min_yield_.end() ? 1 : it->second;
  }

  /// Minimum number of rule applications needed to finish a symbol.
  int min_rules(const std::string& sym) const {
    auto it = min_rules_.find(sym);
    return it == min_rules_.end() ? 0 : it->second;
  }

  const std::set<std::string>& first_set(const std::string& nt) const {
    return first_.at(nt);
  }

  /// Content hash; recorded in model sidecars so checkpoints cannot be
  /// silently reused with a different grammar.
  std::uint64_t hash() const {
    std::string canon;
    for (const auto& r : rules_) {
      canon += r.lhs;
      canon += "->";
      if (r.is_padding) canon += "PAD";
      for (const auto& s : r.rhs) {
        canon += s;
        canon += ' ';
      }
      canon += '\n';
    }
    return fnv1a64(canon);
  }

  /// Terminal tokens ordered longest-first for maximal-munch scanning.
  const std::vector<std::string>& scan_vocabulary() const { return scan_vocab_; }

 private:
  void finalize() {
    start_ = rules_.front().lhs;
    padding_rule_ = -1;
    for (int i = 0; i < num_rules(); ++i) {
      const auto& r = rules_[i];
      if (r.is_padding) {
        if (padding_rule_ >= 0) throw ParseError("grammar: multiple padding rules");
        if (r.lhs != start_) throw ParseError("grammar: padding rule must map the start symbol");
        padding_rule_ = i;
        continue;
      }
      if (r.rhs.empty()) throw ParseError("grammar: empty right-hand side (only PAD may be empty)");
      nonterminals_.insert(r.lhs);
    }
    if (padding_rule_ < 0) throw ParseError("grammar: missing padding rule (PAD)");
    for (const auto& r : rules_)
      for (const auto& s : r.rhs)
        if (!nonterminals_.count(s)) terminals_.insert(s);
    if (terminals_.count("PAD")) throw ParseError("grammar: PAD is reserved");
    for (int i = 0; i < num_rules(); ++i)
      if (!rules_[i].is_padding) by_lhs_[rules_[i].lhs].push_back(i);
    for (const auto& nt : nonterminals_)
      if (!by_lhs_.count(nt)) throw ParseError("grammar: nonterminal without rules: " + nt);
    compute_min_yield();
    compute_first();
    scan_vocab_.assign(terminals_.begin(), terminals_.end());
    std::sort(scan_vocab_.begin(), scan_vocab_.end(), [](const auto& a, const auto& b) {
      return a.size() != b.size() ? a.size() > b.size() : a < b;
    });
  }

  void compute_min_yield() {
    const int inf = std::numeric_limits<int>::max() / 4;
    for (const auto& t : terminals_) {
      min_yield_[t] = 1;
      min_rules_[t] = 0;
    }
    for (const auto& nt : nonterminals_) {
      min_yield_[nt] = inf;
      min_rules_[nt] = inf;
    }
    bool changed = true;
    while (changed) {
      changed = false;
      for (const auto& r : rules_) {
        if (r.is_padding) continue;
        int y = 0, n = 1;
        for (const auto& s : r.rhs) {
          y = std::min(y + min_yield_[s], inf);
          n = std::min(n + min_rules_[s], inf);
        }
        if (y < min_yield_[r.lhs]) {
          min_yield_[r.lhs] = y;
          changed = true;
        }
        if (n < min_rules_[r.lhs]) {
          min_rules_[r.lhs] = n;
          changed = true;
        }
      }
    }
    for (const auto& nt : nonterminals_)
      if (min_yield_[nt] >= inf)
        throw ParseError("grammar: nonterminal cannot derive a terminal string: " + nt);
  }

  void compute_first() {
    // No nullable symbols (empty RHS is rejected), so FIRST is a plain
    // fixpoint over leading symbols.
    for (const auto& nt : nonterminals_) first_[nt] = {};
    bool changed = true;
    while (changed) {
      changed = false;
      for (const auto& r : rules_) {
        if (r.is_padding) continue;
        const auto& lead = r.rhs.front();
        auto& dst = first_[r.lhs];
        std::size_t before = dst.size();
        if (nonterminals_.count(lead)) {
          const auto& src = first_[lead];
          dst.insert(src.begin(), src.end());
        } else {
          dst.insert(lead);
        }
        changed = changed || dst.size() != before;
      }
    }
  }

  std::vector<ProductionRule> rules_;
  std::set<std::string> nonterminals_;
  std::set<std::string> terminals_;
  std::string start_;
  int padding_rule_ = -1;
  bool declared_unambiguous_ = true;
  std::map<std::string, std::vector<int>> by_lhs_;
  std::map<std::string, int> min_yield_;
  std::map<std::string, int> min_rules_;
  std::map<std::string, std::set<std::string>> first_;
  std::vector<std::string> scan_vocab_;
};

/// Leftmost derivation: ordered rule indices into Grammar::rules().
/// Padding never appears here; it exists only as one-hot suffix rows.
struct RuleSequence {
  std::vector<int> indices;

  bool operator==(const RuleSequence& other) const = default;
  int size() const { return static_cast<int>(indices.size()); }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (int i : indices) {
      h ^= static_cast<std::uint64_t>(i) + 0x9e3779b9ull;
      h *= 0x100000001b3ull;
    }
    return h;
  }
};

struct RuleSequenceHash {
  std::size_t operator()(const RuleSequence& s) const { return s.hash(); }
};

namespace detail {

inline bool looks_like_number(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

}  // namespace detail

/// Maximal-munch scanner over a grammar's terminal vocabulary. Scalar
/// literals are abstracted to the placeholder C when the grammar carries
/// it; their values are appended to `extracted` when provided.
inline std::vector<std::string> tokenize(const std::string& text, const Grammar& g,
                                         std::vector<double>* extracted = nullptr) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const bool has_placeholder = g.terminals().count("C") > 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (detail::looks_like_number(c) ||
        (c == '.' && i + 1 < text.size() && detail::looks_like_number(text[i + 1]))) {
      std::size_t j = i;
      while (j < text.size() && (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.'))
        ++j;
      if (j < text.size() && (text[j] == 'e' || text[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < text.size() && (text[k] == '+' || text[k] == '-')) ++k;
        if (k < text.size() && detail::looks_like_number(text[k])) {
          ++k;
          while (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) ++k;
          j = k;
        }
      }
      if (!has_placeholder)
        throw ParseError("tokenize: numeric literal but grammar has no placeholder C: " +
                         text.substr(i, j - i));
      if (extracted) extracted->push_back(std::stod(text.substr(i, j - i)));
      out.push_back("C");
      i = j;
      continue;
    }
    bool matched = false;
    for (const auto& term : g.scan_vocabulary()) {
      if (text.compare(i, term.size(), term) == 0) {
        out.push_back(term);
        i += term.size();
        matched = true;
        break;
      }
    }
    if (!matched)
      throw ParseError("tokenize: unrecognized input at '" + text.substr(i, 8) + "'");
  }
  return out;
}

namespace detail {

/// Earley chart: for every (nonterminal, start) the set of end positions
/// it can span. Grammars here have no epsilon rules (PAD never parses), so
/// every span covers at least one token.
struct EarleyChart {
  std::map<std::pair<std::string, int>, std::set<int>> complete;

  static EarleyChart build(const std::vector<std::string>& tokens, const Grammar& g) {
    const int n = static_cast<int>(tokens.size());
    struct Item {
      int rule, dot, origin;
      auto operator<=>(const Item&) const = default;
    };
    std::vector<std::vector<Item>> sets(n + 1);
    std::vector<std::set<Item>> seen(n + 1);
    std::vector<std::map<std::string, std::vector<Item>>> waiting(n + 1);
    EarleyChart chart;

    auto add = [&](int pos, Item it) {
      if (seen[pos].insert(it).second) sets[pos].push_back(it);
    };
    for (int ri : g.rules_for(g.start())) add(0, Item{ri, 0, 0});

    for (int pos = 0; pos <= n; ++pos) {
      for (std::size_t idx = 0; idx < sets[pos].size(); ++idx) {
        Item it = sets[pos][idx];
        const auto& rule = g.rule(it.rule);
        if (it.dot == static_cast<int>(rule.rhs.size())) {
          chart.complete[{rule.lhs, it.origin}].insert(pos);
          for (const Item& w : waiting[it.origin][rule.lhs])
            add(pos, Item{w.rule, w.dot + 1, w.origin});
          continue;
        }
        const std::string& next = rule.rhs[it.dot];
        if (g.is_nonterminal(next)) {
          waiting[pos][next].push_back(it);
          if (pos < n && !g.first_set(next).count(tokens[pos])) continue;
          for (int ri : g.rules_for(next)) add(pos, Item{ri, 0, pos});
        } else if (pos < n && tokens[pos] == next) {
          add(pos + 1, Item{it.rule, it.dot + 1, it.origin});
        }
      }
    }
    return chart;
  }

  const std::set<int>* ends(const std::string& nt, int start) const {
    auto it = complete.find({nt, start});
    return it == complete.end() ? nullptr : &it->second;
  }
};

/// Enumerates parse trees over a built chart as leftmost rule sequences
/// (pre-order rule emission), capped at `limit` results.
struct TreeEnumerator {
  const std::vector<std::string>* tokens;
  const Grammar* g;
  const EarleyChart* chart;
  int limit;
  std::map<std::tuple<std::string, int, int>, std::vector<std::vector<int>>> memo;
  std::set<std::tuple<std::string, int, int>> in_progress;

  std::vector<std::vector<int>> trees(const std::string& nt, int i, int j) {
    auto key = std::make_tuple(nt, i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    if (!in_progress.insert(key).second)
      throw ParseError("parse: grammar has cyclic unit productions");
    std::vector<std::vector<int>> out;
    for (int ri : g->rules_for(nt)) {
      const auto& rule = g->rule(ri);
      std::vector<std::vector<int>> partial{{ri}};
      expand(rule.rhs, 0, i, j, partial, out);
      if (static_cast<int>(out.size()) >= limit) break;
    }
    in_progress.erase(key);
    memo[key] = out;
    return out;
  }

  // Walk the rule's right-hand side, extending every partial leftmost
  // sequence; `pos` is where symbol `si` must start, the last symbol must
  // end exactly at `j`.
  void expand(const std::vector<std::string>& rhs, std::size_t si, int pos, int j,
              const std::vector<std::vector<int>>& partial, std::vector<std::vector<int>>& out) {
    if (static_cast<int>(out.size()) >= limit) return;
    if (si == rhs.size()) {
      if (pos == j)
        for (const auto& p : partial) {
          out.push_back(p);
          if (static_cast<int>(out.size()) >= limit) return;
        }
      return;
    }
    const std::string& sym = rhs[si];
    if (!g->is_nonterminal(sym)) {
      if (pos < j && (*tokens)[pos] == sym) expand(rhs, si + 1, pos + 1, j, partial, out);
      return;
    }
    int suffix_need = 0;  // tokens the rest of the rule must still consume
    for (std::size_t k = si + 1; k < rhs.size(); ++k) suffix_need += g->min_yield(rhs[k]);
    const std::set<int>* ends = chart->ends(sym, pos);
    if (!ends) return;
    for (int e : *ends) {
      if (e > j - suffix_need) break;
      auto children = trees(sym, pos, e);
      if (children.empty()) continue;
      std::vector<std::vector<int>> extended;
      for (const auto& p : partial) {
        for (const auto& c : children) {
          auto combined = p;
          combined.insert(combined.end(), c.begin(), c.end());
          extended.push_back(std::move(combined));
          if (static_cast<int>(extended.size()) >= limit) break;
        }
        if (static_cast<int>(extended.size()) >= limit) break;
      }
      expand(rhs, si + 1, e, j, extended, out);
      if (static_cast<int>(out.size()) >= limit) return;
    }
  }
};

}  // namespace detail

/// All leftmost derivations of a token string, up to `limit` of them.
inline std::vector<RuleSequence> leftmost_derivations(const std::vector<std::string>& tokens,
                                                      const Grammar& g, int limit) {
  if (tokens.empty()) return {};
  auto chart = detail::EarleyChart::build(tokens, g);
  const std::set<int>* ends = chart.ends(g.start(), 0);
  const int n = static_cast<int>(tokens.size());
  if (!ends || !ends->count(n)) return {};
  detail::TreeEnumerator en{&tokens, &g, &chart, limit, {}, {}};
  auto found = en.trees(g.start(), 0, n);
  std::vector<RuleSequence> out;
  out.reserve(found.size());
  for (auto& f : found) out.push_back(RuleSequence{std::move(f)});
  return out;
}

inline RuleSequence parse_tokens(const std::vector<std::string>& tokens, const Grammar& g) {
  auto derivs = leftmost_derivations(tokens, g, 2);
  if (derivs.empty()) {
    std::string s;
    for (const auto& t : tokens) s += t + " ";
    throw ParseError("parse: string is not in the grammar's language: " + s);
  }
  if (derivs.size() > 1 && g.declared_unambiguous())
    throw AmbiguityError("parse: multiple leftmost derivations for a declared-unambiguous grammar");
  return derivs.front();
}

inline RuleSequence parse(const std::string& expression, const Grammar& g,
                          std::vector<double>* extracted_constants = nullptr) {
  return parse_tokens(tokenize(expression, g, extracted_constants), g);
}

namespace detail {

inline bool wordish(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '\'' || c == '_' || c == '.';
}

}  // namespace detail

/// Expand a complete derivation back into its terminal string. Adjacent
/// word-like tokens get a separating space so the result re-tokenizes
/// identically; operator punctuation is joined tight ("C*u").
inline std::string realize(const RuleSequence& seq, const Grammar& g) {
  std::vector<std::string> sentential{g.start()};
  for (int ri : seq.indices) {
    if (ri < 0 || ri >= g.num_rules())
      throw IncompleteDerivation("realize: rule index out of range");
    const auto& rule = g.rule(ri);
    if (rule.is_padding)
      throw IncompleteDerivation("realize: padding rule inside a derivation");
    auto it = std::find_if(sentential.begin(), sentential.end(),
                           [&](const std::string& s) { return g.is_nonterminal(s); });
    if (it == sentential.end())
      throw IncompleteDerivation("realize: rule applied to a finished derivation");
    if (*it != rule.lhs)
      throw IncompleteDerivation("realize: rule " + std::to_string(ri) +
                                 " does not match leftmost nonterminal " + *it);
    it = sentential.erase(it);
    sentential.insert(it, rule.rhs.begin(), rule.rhs.end());
  }
  std::string out;
  for (const auto& s : sentential) {
    if (g.is_nonterminal(s))
      throw IncompleteDerivation("realize: nonterminals remain after all rules");
    if (!out.empty() && detail::wordish(out.back()) && detail::wordish(s.front())) out += ' ';
    out += s;
  }
  if (out.empty())
    throw IncompleteDerivation("realize: empty derivation");
  return out;
}

/// One-hot rule matrix of shape n_max x n_rules; rows past the derivation
/// select the padding rule.
inline Eigen::MatrixXd encode_one_hot(const RuleSequence& seq, int n_max, const Grammar& g) {
  if (seq.size() > n_max)
    throw LengthError("encode_one_hot: derivation longer than n_max (" +
                      std::to_string(seq.size()) + " > " + std::to_string(n_max) + ")");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n_max, g.num_rules());
  for (int i = 0; i < seq.size(); ++i) {
    int r = seq.indices[i];
    if (r < 0 || r >= g.num_rules()) throw LengthError("encode_one_hot: rule index out of range");
    m(i, r) = 1.0;
  }
  for (int i = seq.size(); i < n_max; ++i) m(i, g.padding_rule_index()) = 1.0;
  return m;
}

/// Row-argmax reading of a one-hot (or near-one-hot) matrix; stops at the
/// first padding row and checks the padding suffix is contiguous.
inline RuleSequence decode_argmax(const Eigen::MatrixXd& m, const Grammar& g) {
  RuleSequence seq;
  bool in_padding = false;
  for (int i = 0; i < m.rows(); ++i) {
    int r;
    m.row(i).maxCoeff(&r);
    if (r == g.padding_rule_index()) {
      in_padding = true;
      continue;
    }
    if (in_padding)
      throw ParseError("decode_argmax: non-padding rule after padding");
    seq.indices.push_back(r);
  }
  return seq;
}

enum class DecodeMode { Argmax, Sample };

/// Grammar-constrained decoding of rule logits. A derivation stack tracks
/// the leftmost nonterminal; only rules rewriting it can be chosen, so the
/// output is a valid derivation by construction. Throws DecodeOverflow if
/// the stack is not empty when the rows run out.
inline RuleSequence masked_decode(const Eigen::MatrixXd& logits, const Grammar& g,
                                  DecodeMode mode, Rng* rng = nullptr) {
  if (!logits.allFinite()) throw ParseError("masked_decode: non-finite logits");
  if (logits.cols() != g.num_rules())
    throw ShapeError("masked_decode: logits must have one column per rule");
  if (mode == DecodeMode::Sample && rng == nullptr)
    throw ParseError("masked_decode: sample mode needs a random source");
  RuleSequence seq;
  std::vector<std::string> stack{g.start()};
  for (int row = 0; row < logits.rows(); ++row) {
    if (stack.empty()) return seq;
    std::string nt = stack.back();
    const auto& eligible = g.rules_for(nt);
    int chosen = eligible.front();
    if (mode == DecodeMode::Argmax || eligible.size() == 1) {
      double best = -std::numeric_limits<double>::infinity();
      for (int ri : eligible) {
        if (logits(row, ri) > best) {
          best = logits(row, ri);
          chosen = ri;
        }
      }
    } else {
      double maxl = -std::numeric_limits<double>::infinity();
      for (int ri : eligible) maxl = std::max(maxl, logits(row, ri));
      std::vector<double> w(eligible.size());
      double total = 0;
      for (std::size_t k = 0; k < eligible.size(); ++k) {
        w[k] = std::exp(logits(row, eligible[k]) - maxl);
        total += w[k];
      }
      double u = uniform(*rng, 0.0, total);
      std::size_t k = 0;
      for (; k + 1 < w.size(); ++k) {
        if (u < w[k]) break;
        u -= w[k];
      }
      chosen = eligible[k];
    }
    stack.pop_back();
    const auto& rule = g.rule(chosen);
    for (auto it = rule.rhs.rbegin(); it != rule.rhs.rend(); ++it)
      if (g.is_nonterminal(*it)) stack.push_back(*it);
    seq.indices.push_back(chosen);
  }
  if (!stack.empty())
    throw DecodeOverflow("masked_decode: derivation incomplete after " +
                         std::to_string(logits.rows()) + " steps");
  return seq;
}

/// Uniform random complete derivation with at most n_max rules, or nullopt
/// when the walk overruns (rejection-sampling semantics).
inline std::optional<RuleSequence> sample_derivation(const Grammar& g, int n_max, Rng& rng) {
  RuleSequence seq;
  std::vector<std::string> stack{g.start()};
  int steps = 0;
  int pending_rules = g.min_rules(g.start());
  while (!stack.empty()) {
    if (steps >= n_max) return std::nullopt;
    std::string nt = stack.back();
    stack.pop_back();
    const auto& eligible = g.rules_for(nt);
    // Filter to rules that can still finish within the budget; falls back
    // to plain uniform if none can (then overruns and rejects).
    std::vector<int> feasible;
    for (int ri : eligible) {
      int delta = 1;
      for (const auto& s : g.rule(ri).rhs)
        if (g.is_nonterminal(s)) delta += g.min_rules(s);
      if (steps + pending_rules - g.min_rules(nt) + delta <= n_max) feasible.push_back(ri);
    }
    const auto& pool = feasible.empty() ? eligible : feasible;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    int chosen = pool[pick(rng)];
    pending_rules -= g.min_rules(nt);
    const auto& rule = g.rule(chosen);
    for (auto it = rule.rhs.rbegin(); it != rule.rhs.rend(); ++it) {
      if (g.is_nonterminal(*it)) {
        stack.push_back(*it);
        pending_rules += g.min_rules(*it);
      }
    }
    seq.indices.push_back(chosen);
    ++steps;
  }
  return seq;
}

/// Heuristic ambiguity probe: realize random derivations and count their
/// leftmost parses. Returns true if evidence of ambiguity was found.
inline bool probe_ambiguity(const Grammar& g, int n_samples, int n_max, Rng& rng) {
  for (int i = 0; i < n_samples; ++i) {
    auto seq = sample_derivation(g, n_max, rng);
    if (!seq) continue;
    auto tokens = tokenize(realize(*seq, g), g);
    if (leftmost_derivations(tokens, g, 2).size() > 1) return true;
  }
  return false;
}

}  // namespace odeforge
