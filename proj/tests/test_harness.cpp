#include <doctest.h>

#include <map>
#include <set>

#include "scalpel/harness.hpp"
#include "scalpel/minilang.hpp"
#include "scalpel/vocab.hpp"

using namespace scalpel;

TEST_CASE("generate_problem is deterministic and tests follow the hidden target") {
    for (int id : {0, 1, 17, 99}) {
        ProblemSpec a = generate_problem(11, id, 2);
        ProblemSpec b = generate_problem(11, id, 2);
        CHECK(a.description == b.description);
        CHECK(a.target_tokens == b.target_tokens);
        auto parsed = minilang::parse(a.target_tokens);
        REQUIRE(parsed.expr);
        CHECK(minilang::contains_var(*parsed.expr));
        std::set<std::int64_t> inputs;
        for (const TestCase& t : a.tests) {
            CHECK(minilang::eval(*parsed.expr, t.input) == t.expected);
            inputs.insert(t.input);
        }
        CHECK(inputs.size() == 3);  // distinct test inputs
    }
    // Different seeds change the problem.
    CHECK(generate_problem(11, 0, 2).target_tokens != generate_problem(12, 0, 2).target_tokens);
}

TEST_CASE("render_prompt spans are ordered, disjoint, and cover everything after BOS") {
    ProblemSpec spec = generate_problem(3, 5, 2);
    PromptBundle p = render_prompt(spec);
    REQUIRE(!p.tokens.empty());
    CHECK(p.tokens[0] == vocab().bos());
    CHECK(p.description.begin == 1);
    CHECK(p.description.end == p.tests.begin);
    CHECK(p.tests.end == p.initiator.begin);
    CHECK(p.initiator.end == p.tokens.size());
    // Last prompt token is the final initiator token.
    CHECK(vocab().lexeme(p.tokens.back()) == "return");
    CHECK(p.problem_id == spec.id);
}

TEST_CASE("evaluate_generation labels the hidden target as passing") {
    ProblemSpec spec = generate_problem(21, 8, 2);
    std::vector<TokenId> gen = spec.target_tokens;
    gen.push_back(vocab().eos());
    LabeledSample s = evaluate_generation(spec, gen);
    CHECK(s.passed);
    CHECK(s.failure_kind == FailureKind::None);
    CHECK(s.per_test[0]);
    CHECK(s.per_test[1]);
    CHECK(s.per_test[2]);
}

TEST_CASE("evaluate_generation failure kinds") {
    ProblemSpec spec = generate_problem(21, 8, 2);
    // Empty generation.
    CHECK(evaluate_generation(spec, {}).failure_kind == FailureKind::NoOutput);
    // Unparseable garbage.
    LabeledSample bad = evaluate_generation(spec, {vocab().id("+"), vocab().id("+")});
    CHECK_FALSE(bad.passed);
    CHECK(bad.failure_kind == FailureKind::ParseError);
    // Valid expression with wrong values: constant 9 cannot satisfy all three
    // distinct-input tests of an x-dependent target.
    LabeledSample wrong = evaluate_generation(spec, {vocab().digit(9)});
    CHECK_FALSE(wrong.passed);
}

TEST_CASE("split_dataset sizes and determinism") {
    std::vector<int> ids100, ids10;
    for (int i = 0; i < 100; ++i) ids100.push_back(i);
    for (int i = 0; i < 10; ++i) ids10.push_back(i);

    SplitAssignment s = split_dataset(ids100, 5);
    CHECK(s.selection_ids.size() == 50);
    CHECK(s.calibration_ids.size() == 10);
    CHECK(s.analysis_ids.size() == 40);

    SplitAssignment t = split_dataset(ids10, 5);
    CHECK(t.selection_ids.size() == 5);
    CHECK(t.calibration_ids.size() == 1);
    CHECK(t.analysis_ids.size() == 4);

    SplitAssignment s2 = split_dataset(ids100, 5);
    CHECK(s.selection_ids == s2.selection_ids);
    CHECK(s.calibration_ids == s2.calibration_ids);
    CHECK(s.analysis_ids == s2.analysis_ids);

    // Partition: every id exactly once.
    std::set<int> all(s.selection_ids.begin(), s.selection_ids.end());
    all.insert(s.calibration_ids.begin(), s.calibration_ids.end());
    all.insert(s.analysis_ids.begin(), s.analysis_ids.end());
    CHECK(all.size() == 100);
}

TEST_CASE("background corpus: length, determinism, vocabulary coverage") {
    auto c = build_background_corpus(0, 1000);
    CHECK(c.size() == 1000);
    CHECK(c == build_background_corpus(0, 1000));
    CHECK(c != build_background_corpus(1, 1000));

    // Histogram oracle: >= 90% of the vocabulary appears in a long stream.
    std::size_t n = 100 * vocab().size();
    auto big = build_background_corpus(2, n);
    std::map<TokenId, int> hist;
    for (TokenId t : big) hist[t]++;
    CHECK(hist.size() >= (vocab().size() * 9) / 10);
}
