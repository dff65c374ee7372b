#include "scalpel/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace scalpel {

HookSpec make_steer_hook(const Eigen::VectorXd& direction, double alpha, int layer,
                         HookPositions positions) {
    if (std::abs(direction.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("steering direction must be unit norm");
    if (!std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite");
    HookSpec h;
    h.layer = layer;
    h.kind = HookKind::AddDirection;
    h.positions = positions;
    h.direction = direction;
    h.alpha = alpha;
    return h;
}

double token_similarity(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    // Multiset Jaccard over lexer tokens, scaled to a percentage.
    std::unordered_map<TokenId, int> ca, cb;
    for (TokenId t : a) ++ca[t];
    for (TokenId t : b) ++cb[t];
    long long inter = 0, uni = 0;
    for (const auto& [t, n] : ca) {
        auto it = cb.find(t);
        int m = it == cb.end() ? 0 : it->second;
        inter += std::min(n, m);
        uni += std::max(n, m);
    }
    for (const auto& [t, n] : cb)
        if (!ca.count(t)) uni += n;
    if (uni == 0) return 100.0;  // empty vs empty
    return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

ExperimentReport run_condition(const Checkpoint& ckpt, const std::vector<ProblemSpec>& problems,
                               const std::vector<bool>& baseline_correct,
                               const std::optional<InterventionSpec>& spec,
                               std::uint64_t seed, int max_new) {
    if (problems.size() != baseline_correct.size())
        throw std::invalid_argument("baseline labels must align with problems");

    const Checkpoint* run_ckpt = &ckpt;
    Checkpoint ortho;
    std::vector<HookSpec> hooks;
    ExperimentReport rep;
    rep.condition = spec ? "intervention" : "baseline";
    if (spec) {
        rep.alpha = spec->alpha;
        if (spec->kind == InterventionKind::Steer) {
            hooks.push_back(make_steer_hook(spec->direction, spec->alpha, spec->layer,
                                            spec->positions));
        } else {
            ortho = orthogonalize_checkpoint(ckpt, spec->direction,
                                             "L" + std::to_string(spec->layer) + "-" +
                                                 std::to_string(spec->latent_index));
            run_ckpt = &ortho;
        }
    }

    double sim_sum = 0.0;
    int sim_count = 0;
    for (std::size_t i = 0; i < problems.size(); ++i) {
        PromptBundle prompt = render_prompt(problems[i]);
        auto gen = generate(*run_ckpt, prompt, 0.0, max_new, hooks, seed);
        bool now_correct = evaluate_generation(problems[i], gen).passed;
        if (baseline_correct[i]) {
            ++rep.n_initially_correct;
            if (!now_correct) ++rep.n_corrupted;
            auto base_gen = generate(ckpt, prompt, 0.0, max_new, {}, seed);
            sim_sum += token_similarity(base_gen, gen);
            ++sim_count;
        } else {
            ++rep.n_initially_incorrect;
            if (now_correct) ++rep.n_corrected;
        }
    }
    rep.correction_rate = rep.n_initially_incorrect
                              ? static_cast<double>(rep.n_corrected) / rep.n_initially_incorrect
                              : 0.0;
    rep.corruption_rate = rep.n_initially_correct
                              ? static_cast<double>(rep.n_corrupted) / rep.n_initially_correct
                              : 0.0;
    rep.mean_token_similarity = sim_count ? sim_sum / sim_count : 100.0;
    return rep;
}

double objective_correct(const ExperimentReport& r) { return r.correction_rate; }

double objective_incorrect(const ExperimentReport& r) {
    return 0.5 * (r.corruption_rate + r.mean_token_similarity / 100.0);
}

CoefficientSearchResult coefficient_search(const std::function<double(double)>& eval_fn,
                                           double alpha_max, double grid_step, double tol) {
    if (alpha_max <= grid_step) throw std::invalid_argument("alpha_max must exceed grid_step");
    std::map<double, double> cache;
    int evals = 0;
    auto f = [&](double a) {
        auto it = cache.find(a);
        if (it != cache.end()) return it->second;
        double v = eval_fn(a);
        ++evals;
        cache.emplace(a, v);
        return v;
    };

    // Phase 1: coarse grid.
    double best_a = 0.0, best_v = f(0.0);
    bool flat = true;
    for (double a = grid_step; a <= alpha_max + 1e-9; a += grid_step) {
        double v = f(a);
        if (v != best_v) flat = false;
        if (v > best_v) {
            best_v = v;
            best_a = a;
        }
    }
    CoefficientSearchResult res;
    if (flat) {
        res.alpha = 0.0;
        res.objective = best_v;
        res.flat_objective = true;
        res.evaluations = evals;
        return res;
    }

    // Phase 2: golden-section maximization on the bracket around the grid best.
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = std::max(0.0, best_a - grid_step);
    double hi = std::min(alpha_max, best_a + grid_step);
    double x1 = hi - phi * (hi - lo);
    double x2 = lo + phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (hi - lo > tol) {
        res.bracket_trace.emplace_back(lo, hi);
        if (f1 < f2) {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        }
    }
    res.bracket_trace.emplace_back(lo, hi);

    double a_star = std::round(0.5 * (lo + hi));
    a_star = std::clamp(a_star, 0.0, alpha_max);
    double v_star = f(a_star);
    // Never return a coefficient whose cached objective is below the best grid
    // point's.
    if (v_star >= best_v) {
        res.alpha = a_star;
        res.objective = v_star;
    } else {
        res.alpha = best_a;
        res.objective = best_v;
    }
    res.evaluations = evals;
    return res;
}

std::pair<int, int> select_control_feature(const std::vector<std::vector<FeatureStats>>& stats,
                                           double min_fire_rate) {
    const FeatureStats* best = nullptr;
    auto fire_rate = [](const FeatureStats& f) { return 0.5 * (f.f_correct + f.f_incorrect); };
    for (const auto& layer_stats : stats) {
        for (const FeatureStats& f : layer_stats) {
            if (!f.background_ok || fire_rate(f) < min_fire_rate) continue;
            if (!best) {
                best = &f;
                continue;
            }
            double s = std::abs(f.s_correct), bs = std::abs(best->s_correct);
            double t = f.valid_t ? std::abs(f.t_correct) : 0.0;
            double bt = best->valid_t ? std::abs(best->t_correct) : 0.0;
            if (s < bs || (s == bs && t < bt)) best = &f;  // scan order breaks remaining ties
        }
    }
    if (!best) throw std::runtime_error("no eligible control feature");
    return {best->layer, best->index};
}

double binomial_test_greater(int k, int n, double p0) {
    if (k < 0 || n < 0 || k > n) throw std::invalid_argument("need 0 <= k <= n");
    if (p0 < 0.0 || p0 > 1.0) throw std::invalid_argument("p0 must be in [0,1]");
    if (k == 0) return 1.0;
    if (p0 == 0.0) return 0.0;  // degenerate null: any success is impossible
    if (p0 == 1.0) return 1.0;

    // Exact tail sum, smallest terms first for stable accumulation.
    const double lp = std::log(p0), lq = std::log1p(-p0);
    std::vector<long double> terms;
    terms.reserve(static_cast<std::size_t>(n - k + 1));
    for (int i = k; i <= n; ++i) {
        double lt = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) +
                    i * lp + (n - i) * lq;
        terms.push_back(expl(static_cast<long double>(lt)));
    }
    std::sort(terms.begin(), terms.end());
    long double p = 0.0L;
    for (long double t : terms) p += t;
    return std::min(1.0, static_cast<double>(p));
}

namespace {

void attach_pvalues(ExperimentReport& steering, const ExperimentReport& baseline,
                    const ExperimentReport& control) {
    steering.p_vs_baseline_correction = binomial_test_greater(
        steering.n_corrected, steering.n_initially_incorrect, baseline.correction_rate);
    steering.p_vs_baseline_corruption = binomial_test_greater(
        steering.n_corrupted, steering.n_initially_correct, baseline.corruption_rate);
    steering.p_vs_control_correction = binomial_test_greater(
        steering.n_corrected, steering.n_initially_incorrect, control.correction_rate);
    steering.p_vs_control_corruption = binomial_test_greater(
        steering.n_corrupted, steering.n_initially_correct, control.corruption_rate);
}

}  // namespace

SteeringExperiment run_steering_experiment(const Checkpoint& ckpt,
                                           const std::vector<ProblemSpec>& problems,
                                           const std::vector<bool>& baseline_correct,
                                           const InterventionSpec& steering,
                                           const InterventionSpec& control_in,
                                           std::uint64_t seed, int max_new) {
    InterventionSpec control = control_in;
    control.alpha = steering.alpha;  // control runs at the steering arm's coefficient
    SteeringExperiment exp;
    exp.baseline = run_condition(ckpt, problems, baseline_correct, std::nullopt, seed, max_new);
    exp.baseline.condition = "baseline";
    exp.control = run_condition(ckpt, problems, baseline_correct, control, seed, max_new);
    exp.control.condition = "control";
    exp.steering = run_condition(ckpt, problems, baseline_correct, steering, seed, max_new);
    exp.steering.condition = "steering_direction";
    attach_pvalues(exp.steering, exp.baseline, exp.control);
    return exp;
}

SteeringExperiment run_orthogonalization_experiment(const Checkpoint& ckpt,
                                                    const std::vector<ProblemSpec>& problems,
                                                    const std::vector<bool>& baseline_correct,
                                                    const Eigen::VectorXd& steer_direction,
                                                    const Eigen::VectorXd& control_direction,
                                                    std::uint64_t seed, int max_new) {
    auto make_spec = [](const Eigen::VectorXd& d) {
        InterventionSpec s;
        s.kind = InterventionKind::Orthogonalize;
        s.direction = d;
        return s;
    };
    SteeringExperiment exp;
    exp.baseline = run_condition(ckpt, problems, baseline_correct, std::nullopt, seed, max_new);
    exp.baseline.condition = "baseline";
    exp.control =
        run_condition(ckpt, problems, baseline_correct, make_spec(control_direction), seed, max_new);
    exp.control.condition = "control";
    exp.steering =
        run_condition(ckpt, problems, baseline_correct, make_spec(steer_direction), seed, max_new);
    exp.steering.condition = "steering_direction";
    attach_pvalues(exp.steering, exp.baseline, exp.control);
    return exp;
}

}  // namespace scalpel
