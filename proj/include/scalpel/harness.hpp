#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "scalpel/minilang.hpp"
#include "scalpel/vocab.hpp"

namespace scalpel {

struct TestCase {
    std::int64_t input;
    std::int64_t expected;
};

struct ProblemSpec {
    int id = 0;
    std::vector<TokenId> description;
    std::string function_name = "f";
    std::array<TestCase, 3> tests{};
    int difficulty = 1;
    // Hidden target the tests were generated from; guarantees solvability and
    // provides the supervised solution for LM training.
    std::vector<TokenId> target_tokens;
};

struct Span {
    std::size_t begin = 0;  // half-open [begin, end)
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
};

struct PromptBundle {
    int problem_id = 0;
    std::vector<TokenId> tokens;
    Span description;
    Span tests;
    Span initiator;
};

enum class FailureKind { None, ParseError, WrongValue, NoOutput };

struct LabeledSample {
    int problem_id = 0;
    std::vector<TokenId> generated_tokens;
    bool passed = false;
    std::array<bool, 3> per_test{};
    FailureKind failure_kind = FailureKind::None;
};

struct SplitAssignment {
    std::vector<int> selection_ids;
    std::vector<int> calibration_ids;
    std::vector<int> analysis_ids;
};

ProblemSpec generate_problem(std::uint64_t seed, int id, int difficulty);
PromptBundle render_prompt(const ProblemSpec& spec);
LabeledSample evaluate_generation(const ProblemSpec& spec, const std::vector<TokenId>& generated);
SplitAssignment split_dataset(const std::vector<int>& ids, std::uint64_t seed);
std::vector<TokenId> build_background_corpus(std::uint64_t seed, std::size_t n_tokens);

std::string failure_kind_name(FailureKind k);

}  // namespace scalpel
