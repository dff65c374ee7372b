#include <doctest.h>

#include <cmath>
#include <vector>

#include "scalpel/intervene.hpp"
#include "scalpel/rng.hpp"

using namespace scalpel;

namespace {

// Independent binomial tail oracle: recurrence pmf(k+1) = pmf(k)·(n−k)/(k+1)·p/(1−p)
// in long double, summed upward from k.
long double oracle_binom_tail(int k, int n, double p0) {
    if (p0 <= 0.0) return k >= 1 ? 0.0L : 1.0L;
    if (p0 >= 1.0) return 1.0L;
    if (k <= 0) return 1.0L;
    long double p = p0, q = 1.0L - p0;
    long double pmf = powl(q, n);
    long double tail = k == 0 ? pmf : 0.0L;
    for (int i = 0; i < n; ++i) {
        pmf *= static_cast<long double>(n - i) / static_cast<long double>(i + 1) * (p / q);
        if (i + 1 >= k) tail += pmf;
    }
    return tail;
}

}  // namespace

TEST_CASE("binomial_test_greater matches the recurrence oracle over a 500-case grid") {
    int cases = 0;
    for (int n : {1, 2, 5, 10, 22, 40, 88}) {
        for (double p0 : {0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
            for (int k = 0; k <= n; k += std::max(1, n / 12)) {
                double got = binomial_test_greater(k, n, p0);
                double want = static_cast<double>(oracle_binom_tail(k, n, p0));
                CHECK(std::abs(got - want) <= 1e-12);
                CHECK(got >= 0.0);
                CHECK(got <= 1.0 + 1e-15);
                ++cases;
            }
        }
    }
    CHECK(cases >= 500);
}

TEST_CASE("token_similarity is multiset Jaccard in percent") {
    CHECK(token_similarity({}, {}) == 100.0);
    CHECK(token_similarity({1, 2, 3}, {1, 2, 3}) == 100.0);
    CHECK(token_similarity({1, 2, 2}, {2, 3}) == doctest::Approx(25.0));
    CHECK(token_similarity({1}, {2}) == 0.0);
    CHECK(token_similarity({}, {1}) == 0.0);
    // Symmetry.
    CHECK(token_similarity({1, 1, 4}, {1, 4, 4}) == token_similarity({1, 4, 4}, {1, 1, 4}));
}

TEST_CASE("steering objectives") {
    ExperimentReport r;
    r.correction_rate = 0.4;
    r.corruption_rate = 0.3;
    r.mean_token_similarity = 80.0;
    CHECK(objective_correct(r) == doctest::Approx(0.4));
    CHECK(objective_incorrect(r) == doctest::Approx(0.5 * (0.3 + 0.8)));
}

TEST_CASE("coefficient search: analytic unimodal cases") {
    // max at 29.3 → integer 29.
    auto f = [](double a) { return -(a - 29.3) * (a - 29.3); };
    CoefficientSearchResult r = coefficient_search(f, 300.0, 10.0);
    CHECK(r.alpha == 29.0);
    CHECK_FALSE(r.flat_objective);

    // Golden-section bracket shrinks by (√5−1)/2 per iteration.
    REQUIRE(r.bracket_trace.size() >= 2);
    const double phi = 0.6180339887498949;
    for (std::size_t i = 0; i + 1 < r.bracket_trace.size(); ++i) {
        double w0 = r.bracket_trace[i].second - r.bracket_trace[i].first;
        double w1 = r.bracket_trace[i + 1].second - r.bracket_trace[i + 1].first;
        CHECK(std::abs(w1 / w0 - phi) <= 0.001);
    }

    // Seeded random unimodal maxima recovered within ±1.
    Rng rng = make_rng(2, "coef-test");
    for (int rep = 0; rep < 25; ++rep) {
        double peak = 5.0 + rand_unit(rng) * 250.0;
        auto g = [peak](double a) { return -(a - peak) * (a - peak); };
        CoefficientSearchResult s = coefficient_search(g, 300.0, 10.0);
        CHECK(std::abs(s.alpha - peak) <= 1.0);
    }
}

TEST_CASE("coefficient search: flat, monotone, and boundary behavior") {
    CoefficientSearchResult flat = coefficient_search([](double) { return 0.0; }, 300.0, 10.0);
    CHECK(flat.flat_objective);
    CHECK(flat.alpha == 0.0);

    CoefficientSearchResult inc = coefficient_search([](double a) { return a; }, 300.0, 10.0);
    CHECK(inc.alpha == 300.0);

    // Result never scores below the best grid point.
    auto bumpy = [](double a) { return std::sin(a / 7.0) + 0.01 * a; };
    CoefficientSearchResult b = coefficient_search(bumpy, 300.0, 10.0);
    double best_grid = -1e300;
    for (double a = 0.0; a <= 300.0; a += 10.0) best_grid = std::max(best_grid, bumpy(a));
    CHECK(bumpy(b.alpha) >= best_grid - 1e-9);

    CHECK_THROWS(coefficient_search([](double) { return 0.0; }, 5.0, 10.0));
}

TEST_CASE("control feature selection: minimal |s|, then |t|, background-gated") {
    auto mk = [](int layer, int idx, double t, double s, double fc, double fi, bool bg_ok) {
        FeatureStats f;
        f.layer = layer;
        f.index = idx;
        f.t_correct = t;
        f.s_correct = s;
        f.f_correct = fc;
        f.f_incorrect = fi;
        f.background_ok = bg_ok;
        f.valid_t = true;
        return f;
    };
    std::vector<std::vector<FeatureStats>> stats = {{
        mk(0, 0, 0.1, 0.00, 0.5, 0.5, false),  // would win but fails background
        mk(0, 1, 5.0, 0.01, 0.6, 0.6, true),
        mk(0, 2, 0.2, 0.01, 0.7, 0.7, true),   // same |s|, smaller |t| → wins
        mk(0, 3, 0.0, 0.00, 0.05, 0.05, true), // too rare (fire < 10%)
    }};
    auto [layer, index] = select_control_feature(stats, 0.10);
    CHECK(layer == 0);
    CHECK(index == 2);

    // Selected |s| is minimal among eligible candidates.
    for (const auto& f : stats[0]) {
        bool eligible = f.background_ok && (f.f_correct + f.f_incorrect) / 2 >= 0.10;
        if (eligible) CHECK(std::abs(stats[0][2].s_correct) <= std::abs(f.s_correct) + 1e-15);
    }

    std::vector<std::vector<FeatureStats>> none = {{mk(0, 0, 0.0, 0.0, 0.5, 0.5, false)}};
    CHECK_THROWS(select_control_feature(none, 0.10));
}

TEST_CASE("make_steer_hook validates unit direction") {
    Eigen::VectorXd unit = Eigen::VectorXd::Unit(8, 0);
    HookSpec h = make_steer_hook(unit, 3.0, 1);
    CHECK(h.layer == 1);
    CHECK(h.kind == HookKind::AddDirection);
    CHECK(h.alpha == 3.0);
    CHECK_THROWS(make_steer_hook(2.0 * unit, 3.0, 1));
}

TEST_CASE("run_condition: baseline has zero rates; alpha=0 steering is baseline") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.max_seq_len = 64;
    cfg.rng_seed = 3;
    Checkpoint ckpt = init_checkpoint(cfg);

    std::vector<ProblemSpec> problems;
    for (int i = 0; i < 4; ++i) problems.push_back(generate_problem(5, i, 1));
    std::vector<bool> base_labels;
    for (const auto& p : problems) {
        auto gen = generate(ckpt, render_prompt(p), 0.0, 8, {}, 0);
        base_labels.push_back(evaluate_generation(p, gen).passed);
    }

    ExperimentReport base = run_condition(ckpt, problems, base_labels, std::nullopt, 0, 8);
    CHECK(base.correction_rate == 0.0);
    CHECK(base.corruption_rate == 0.0);
    CHECK(base.mean_token_similarity == 100.0);

    InterventionSpec spec;
    spec.kind = InterventionKind::Steer;
    spec.layer = 0;
    spec.direction = Eigen::VectorXd::Unit(8, 2);
    spec.alpha = 0.0;
    ExperimentReport zero = run_condition(ckpt, problems, base_labels, spec, 0, 8);
    CHECK(zero.correction_rate == 0.0);
    CHECK(zero.corruption_rate == 0.0);
    CHECK(zero.mean_token_similarity == 100.0);
}
