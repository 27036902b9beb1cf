#include <catch2/catch_amalgamated.hpp>

#include "odeforge/grammar.hpp"

using namespace odeforge;

namespace {

Grammar toy() { return Grammar::from_file(std::string(ODEFORGE_SOURCE_DIR) + "/data/grammars/toy.grammar"); }
Grammar first_order() {
  return Grammar::from_file(std::string(ODEFORGE_SOURCE_DIR) + "/data/grammars/first_order.grammar");
}
Grammar second_order() {
  return Grammar::from_file(std::string(ODEFORGE_SOURCE_DIR) + "/data/grammars/second_order.grammar");
}

}  // namespace

TEST_CASE("grammar file loading and invariants") {
  Grammar g = toy();
  CHECK(g.num_rules() == 4);
  CHECK(g.start() == "S");
  CHECK(g.padding_rule_index() == 3);
  CHECK(g.nonterminals() == std::set<std::string>{"S"});
  CHECK(g.terminals() == std::set<std::string>{"*", "C", "u"});

  // Disjointness holds by construction: anything on a left-hand side is a
  // nonterminal, everything else a terminal.
  for (const auto& nt : g.nonterminals()) CHECK_FALSE(g.terminals().count(nt));

  CHECK_THROWS_AS(Grammar::from_string("S -> C\n"), ParseError);          // no PAD
  CHECK_THROWS_AS(Grammar::from_string("S -> PAD\nS -> PAD\nS -> C\n"), ParseError);
  CHECK_THROWS_AS(Grammar::from_string("S -> A\nA -> A\nS -> PAD\n"), ParseError); // A never finishes
}

TEST_CASE("parse on the toy grammar matches the pinned derivation") {
  Grammar g = toy();
  RuleSequence seq = parse("C*u", g);
  CHECK(seq.indices == std::vector<int>{0, 1, 2});
  CHECK(realize(seq, g) == "C*u");
}

TEST_CASE("parse rejects strings outside the language") {
  Grammar g = toy();
  CHECK_THROWS_AS(parse("C+u", g), ParseError);
  CHECK_THROWS_AS(parse("*", g), ParseError);
}

TEST_CASE("parse flags ambiguity on declared-unambiguous grammars") {
  Grammar g = toy();  // S -> S * S makes C*u*C ambiguous
  CHECK_THROWS_AS(parse("C*u*C", g), AmbiguityError);
  Grammar lax = Grammar::from_file(std::string(ODEFORGE_SOURCE_DIR) + "/data/grammars/toy.grammar",
                                   /*declared_unambiguous=*/false);
  CHECK_NOTHROW(parse("C*u*C", lax));
  Rng rng(7);
  CHECK(probe_ambiguity(lax, 50, 15, rng));
  Rng rng2(7);
  CHECK_FALSE(probe_ambiguity(first_order(), 50, 25, rng2));
}

TEST_CASE("realize errors") {
  Grammar g = toy();
  CHECK_THROWS_AS(realize(RuleSequence{{}}, g), IncompleteDerivation);
  CHECK_THROWS_AS(realize(RuleSequence{{3}}, g), IncompleteDerivation);   // padding-only
  CHECK_THROWS_AS(realize(RuleSequence{{0, 1}}, g), IncompleteDerivation); // unfinished
  CHECK_THROWS_AS(realize(RuleSequence{{1, 1}}, g), IncompleteDerivation); // rule after done
}

TEST_CASE("logistic skeleton roundtrips through the first-order grammar") {
  Grammar g = first_order();
  RuleSequence seq = parse("C*u*(C - u)", g);
  std::string realized = realize(seq, g);
  CHECK(parse(realized, g) == seq);
  CHECK(realized == "C*u*(C-u)");
}

TEST_CASE("roundtrip property: parse(realize(seq)) == seq") {
  for (auto g : {first_order(), second_order()}) {
    Rng rng(12345);
    int done = 0;
    while (done < 300) {
      auto seq = sample_derivation(g, 25, rng);
      if (!seq) continue;
      auto text = realize(*seq, g);
      CAPTURE(text);
      REQUIRE(parse(text, g) == *seq);
      ++done;
    }
  }
}

TEST_CASE("pre-tokenizer abstracts scalar literals to the placeholder") {
  Grammar g = first_order();
  std::vector<double> values;
  RuleSequence with_literals = parse("2.5*u*(1 - u)", g, &values);
  RuleSequence with_placeholders = parse("C*u*(C - u)", g);
  CHECK(with_literals == with_placeholders);
  CHECK(values == std::vector<double>{2.5, 1.0});

  Grammar no_c = Grammar::from_string("S -> u\nS -> PAD\n");
  CHECK_THROWS_AS(parse("3.0", no_c), ParseError);
}

TEST_CASE("one-hot encoding and argmax decoding") {
  Grammar g = toy();
  RuleSequence seq{{0, 1, 2}};
  Eigen::MatrixXd m = encode_one_hot(seq, 5, g);
  REQUIRE(m.rows() == 5);
  REQUIRE(m.cols() == 4);
  for (int i = 0; i < 5; ++i) CHECK(m.row(i).sum() == 1.0);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(1, 1) == 1.0);
  CHECK(m(2, 2) == 1.0);
  CHECK(m(3, 3) == 1.0);
  CHECK(m(4, 3) == 1.0);
  CHECK(decode_argmax(m, g) == seq);

  Eigen::MatrixXd empty = encode_one_hot(RuleSequence{{}}, 3, g);
  for (int i = 0; i < 3; ++i) CHECK(empty(i, 3) == 1.0);

  CHECK_THROWS_AS(encode_one_hot(RuleSequence{{0, 1, 1, 2}}, 3, g), LengthError);
}

TEST_CASE("one-hot roundtrip on random derivations") {
  Grammar g = first_order();
  Rng rng(99);
  int done = 0;
  while (done < 200) {
    auto seq = sample_derivation(g, 25, rng);
    if (!seq) continue;
    CHECK(decode_argmax(encode_one_hot(*seq, 25, g), g) == *seq);
    ++done;
  }
}

TEST_CASE("masked decode obeys the grammar mask") {
  Grammar g = toy();

  SECTION("ineligible rule with the highest logit is ignored") {
    // After S -> C the derivation is complete; rows beyond are unused.
    // In row 0, give the (eligible) rules low scores and check the top
    // eligible one wins even though padding scores higher.
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(4, 4);
    logits(0, 3) = 100.0;  // padding: never eligible mid-derivation
    logits(0, 1) = 1.0;    // S -> C: best eligible
    logits(0, 0) = 0.5;
    RuleSequence seq = masked_decode(logits, g, DecodeMode::Argmax);
    CHECK(seq.indices == std::vector<int>{1});
  }

  SECTION("a valid one-hot matrix decodes to exactly that sequence") {
    RuleSequence seq{{0, 1, 2}};
    Eigen::MatrixXd logits = encode_one_hot(seq, 5, g);
    CHECK(masked_decode(logits, g, DecodeMode::Argmax) == seq);
  }

  SECTION("overflow raises DecodeOverflow") {
    // Always prefer S -> S * S: the stack grows forever.
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(6, 4);
    logits.col(0).setConstant(5.0);
    CHECK_THROWS_AS(masked_decode(logits, g, DecodeMode::Argmax), DecodeOverflow);
  }
}

TEST_CASE("masked decode validity over random logits") {
  Grammar g = first_order();
  Rng rng(2024);
  std::normal_distribution<double> noise(0.0, 3.0);
  int complete = 0, overflow = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    Eigen::MatrixXd logits(25, g.num_rules());
    for (int i = 0; i < logits.rows(); ++i)
      for (int j = 0; j < logits.cols(); ++j) logits(i, j) = noise(rng);
    try {
      RuleSequence seq = masked_decode(logits, g, DecodeMode::Sample, &rng);
      // Completeness: realize succeeds only for complete derivations.
      CHECK_NOTHROW(realize(seq, g));
      ++complete;
    } catch (const DecodeOverflow&) {
      ++overflow;
    }
  }
  CHECK(complete + overflow == 2000);
  CHECK(complete > 0);
}

TEST_CASE("sampled derivations are unbiased enough to cover the language") {
  Grammar g = first_order();
  Rng rng(5);
  std::set<std::vector<int>> unique;
  for (int i = 0; i < 2000; ++i) {
    auto seq = sample_derivation(g, 20, rng);
    if (seq) unique.insert(seq->indices);
  }
  CHECK(unique.size() > 100);
}
