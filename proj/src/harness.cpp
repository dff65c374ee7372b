#include "scalpel/harness.hpp"

#include <algorithm>
#include <stdexcept>

#include "scalpel/rng.hpp"

namespace scalpel {

namespace {

using minilang::Expr;
using minilang::NodeKind;

std::unique_ptr<Expr> random_expr(Rng& rng, int depth) {
    if (depth == 0) {
        if (rand_below(rng, 2) == 0) return Expr::var();
        return Expr::lit(static_cast<int>(rand_below(rng, 10)));
    }
    NodeKind ops[3] = {NodeKind::Add, NodeKind::Sub, NodeKind::Mul};
    NodeKind k = ops[rand_below(rng, 3)];
    // One side carries the full remaining depth; the other is free to be
    // shallower so trees are not always complete.
    int other = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(depth)));
    auto l = random_expr(rng, depth - 1);
    auto r = random_expr(rng, other);
    if (rand_below(rng, 2) == 0) std::swap(l, r);
    return Expr::op(k, std::move(l), std::move(r));
}

// Verbalize a target expression as description words.
void verbalize(const Expr& e, std::vector<TokenId>& out) {
    const Vocab& v = vocab();
    switch (e.kind) {
        case NodeKind::Var: out.push_back(v.id("x")); return;
        case NodeKind::Literal: out.push_back(v.digit(e.value)); return;
        default: break;
    }
    bool wrap = e.lhs->kind != NodeKind::Var && e.lhs->kind != NodeKind::Literal;
    if (wrap) out.push_back(v.id("open"));
    verbalize(*e.lhs, out);
    if (wrap) out.push_back(v.id("close"));
    out.push_back(v.id(e.kind == NodeKind::Add ? "plus"
                       : e.kind == NodeKind::Sub ? "minus"
                                                 : "times"));
    wrap = e.rhs->kind != NodeKind::Var && e.rhs->kind != NodeKind::Literal;
    if (wrap) out.push_back(v.id("open"));
    verbalize(*e.rhs, out);
    if (wrap) out.push_back(v.id("close"));
}

}  // namespace

ProblemSpec generate_problem(std::uint64_t seed, int id, int difficulty) {
    if (difficulty < 1 || difficulty > 4) throw std::invalid_argument("difficulty must be in [1,4]");
    Rng rng = make_rng(seed, "problem/" + std::to_string(id));

    std::unique_ptr<Expr> target;
    do {
        target = random_expr(rng, difficulty);
    } while (!minilang::contains_var(*target));

    // Three distinct inputs in [0, 9].
    std::array<std::int64_t, 3> inputs{};
    std::vector<int> pool(10);
    for (int i = 0; i < 10; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < 3; ++i) {
        std::size_t pick = rand_below(rng, pool.size());
        inputs[static_cast<std::size_t>(i)] = pool[pick];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }

    ProblemSpec spec;
    spec.id = id;
    spec.difficulty = difficulty;
    spec.function_name = "f";
    const Vocab& v = vocab();
    spec.description = {v.id("write"), v.id("a"), v.id("function"), v.id("that"), v.id("computes")};
    verbalize(*target, spec.description);
    for (int i = 0; i < 3; ++i) {
        spec.tests[static_cast<std::size_t>(i)] = {
            inputs[static_cast<std::size_t>(i)],
            minilang::eval(*target, inputs[static_cast<std::size_t>(i)])};
    }
    spec.target_tokens = minilang::to_tokens(*target);
    return spec;
}

PromptBundle render_prompt(const ProblemSpec& spec) {
    const Vocab& v = vocab();
    PromptBundle p;
    p.problem_id = spec.id;
    p.tokens.push_back(v.bos());

    p.description.begin = p.tokens.size();
    p.tokens.insert(p.tokens.end(), spec.description.begin(), spec.description.end());
    p.tokens.push_back(v.newline());
    p.description.end = p.tokens.size();

    p.tests.begin = p.tokens.size();
    for (const TestCase& t : spec.tests) {
        p.tokens.push_back(v.id("assert"));
        p.tokens.push_back(v.id("f"));
        p.tokens.push_back(v.id("("));
        auto in = minilang::render_int(t.input);
        p.tokens.insert(p.tokens.end(), in.begin(), in.end());
        p.tokens.push_back(v.id(")"));
        p.tokens.push_back(v.id("="));
        auto out = minilang::render_int(t.expected);
        p.tokens.insert(p.tokens.end(), out.begin(), out.end());
        p.tokens.push_back(v.newline());
    }
    p.tests.end = p.tokens.size();

    p.initiator.begin = p.tokens.size();
    for (const char* s : {"def", "f", "(", "x", ")", ":", "return"})
        p.tokens.push_back(v.id(s));
    p.initiator.end = p.tokens.size();
    return p;
}

LabeledSample evaluate_generation(const ProblemSpec& spec, const std::vector<TokenId>& generated) {
    LabeledSample s;
    s.problem_id = spec.id;
    s.generated_tokens = generated;

    // Expression ends at the first EOS; BOS, <nl> and anything after EOS are ignored.
    const Vocab& v = vocab();
    std::vector<TokenId> body;
    for (TokenId t : generated) {
        if (t == v.eos()) break;
        if (t == v.bos() || t == v.newline()) continue;
        body.push_back(t);
    }
    if (body.empty()) {
        s.failure_kind = FailureKind::NoOutput;
        return s;
    }
    auto parsed = minilang::parse(body);
    if (!parsed.expr) {
        s.failure_kind = FailureKind::ParseError;
        return s;
    }
    bool all = true;
    for (std::size_t i = 0; i < 3; ++i) {
        std::int64_t got = minilang::eval(*parsed.expr, spec.tests[i].input);
        s.per_test[i] = got == spec.tests[i].expected;
        all = all && s.per_test[i];
    }
    s.passed = all;
    s.failure_kind = all ? FailureKind::None : FailureKind::WrongValue;
    return s;
}

SplitAssignment split_dataset(const std::vector<int>& ids, std::uint64_t seed) {
    if (ids.size() < 10) throw std::invalid_argument("split_dataset requires at least 10 ids");
    std::vector<int> shuffled = ids;
    Rng rng = make_rng(seed, "split");
    // Fisher-Yates
    for (std::size_t i = shuffled.size() - 1; i > 0; --i) {
        std::size_t j = rand_below(rng, i + 1);
        std::swap(shuffled[i], shuffled[j]);
    }
    std::size_t n = shuffled.size();
    std::size_t n_sel = n / 2;        // floor(0.5 n)
    std::size_t n_cal = n / 10;       // floor(0.1 n)
    SplitAssignment a;
    a.selection_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_sel));
    a.calibration_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_sel),
                             shuffled.begin() + static_cast<std::ptrdiff_t>(n_sel + n_cal));
    a.analysis_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_sel + n_cal), shuffled.end());
    return a;
}

std::vector<TokenId> build_background_corpus(std::uint64_t seed, std::size_t n_tokens) {
    if (n_tokens < 1) throw std::invalid_argument("n_tokens must be >= 1");
    Rng rng = make_rng(seed, "background");
    std::size_t vs = vocab().size();
    std::vector<TokenId> out(n_tokens);
    for (auto& t : out) t = static_cast<TokenId>(rand_below(rng, vs));
    return out;
}

std::string failure_kind_name(FailureKind k) {
    switch (k) {
        case FailureKind::None: return "none";
        case FailureKind::ParseError: return "parse_error";
        case FailureKind::WrongValue: return "wrong_value";
        case FailureKind::NoOutput: return "no_output";
    }
    return "none";
}

}  // namespace scalpel
