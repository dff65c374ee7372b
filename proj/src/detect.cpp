#include "scalpel/detect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace scalpel {

double f1_from_pr(double precision, double recall) {
    double s = precision + recall;
    return s == 0.0 ? 0.0 : 2.0 * precision * recall / s;
}

DetectionReport classification_metrics(const std::vector<ScoredSample>& samples, double tau) {
    DetectionReport r;
    r.threshold = tau;
    for (const ScoredSample& s : samples) {
        bool pred = s.score > tau;
        if (pred && s.positive) ++r.confusion.tp;
        else if (pred && !s.positive) ++r.confusion.fp;
        else if (!pred && s.positive) ++r.confusion.fn;
        else ++r.confusion.tn;
    }
    const ConfusionCounts& c = r.confusion;
    // Degenerate conventions: with no predicted positives, precision is 1.0
    // when there are also no actual positives, else 0.0; recall with no actual
    // positives is 1.0.
    if (c.tp + c.fp == 0) {
        r.precision = (c.tp + c.fn == 0) ? 1.0 : 0.0;
    } else {
        r.precision = static_cast<double>(c.tp) / (c.tp + c.fp);
    }
    r.recall = (c.tp + c.fn == 0) ? 1.0 : static_cast<double>(c.tp) / (c.tp + c.fn);
    r.f1 = f1_from_pr(r.precision, r.recall);
    return r;
}

double calibrate_threshold(const std::vector<ScoredSample>& calibration) {
    bool has_pos = false, has_neg = false;
    for (const ScoredSample& s : calibration) (s.positive ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw std::invalid_argument("calibration set must contain both classes");

    std::vector<double> scores;
    scores.reserve(calibration.size());
    for (const ScoredSample& s : calibration) scores.push_back(s.score);
    std::sort(scores.begin(), scores.end());
    scores.erase(std::unique(scores.begin(), scores.end()), scores.end());

    std::vector<double> candidates;
    candidates.push_back(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i + 1 < scores.size(); ++i)
        candidates.push_back(0.5 * (scores[i] + scores[i + 1]));
    candidates.push_back(std::numeric_limits<double>::infinity());

    double best_tau = candidates.front();
    double best_f1 = -1.0;
    for (double tau : candidates) {
        double f1 = classification_metrics(calibration, tau).f1;
        if (f1 > best_f1) {  // ties keep the smallest tau (scan order)
            best_f1 = f1;
            best_tau = tau;
        }
    }
    return best_tau;
}

double auroc(const std::vector<ScoredSample>& samples) {
    // Mann-Whitney: P(random positive outscores random negative), ties 1/2.
    double wins = 0.0;
    long long pairs = 0;
    for (const ScoredSample& p : samples) {
        if (!p.positive) continue;
        for (const ScoredSample& n : samples) {
            if (n.positive) continue;
            ++pairs;
            if (p.score > n.score) wins += 1.0;
            else if (p.score == n.score) wins += 0.5;
        }
    }
    if (pairs == 0) throw std::invalid_argument("auroc requires both classes");
    return wins / static_cast<double>(pairs);
}

std::vector<LogitLensEntry> logit_lens(const Checkpoint& ckpt, const SAEParams& sae,
                                       int latent_index, int k) {
    if (latent_index < 0 || latent_index >= sae.d_sae())
        throw std::invalid_argument("latent index out of range");
    Eigen::VectorXd dir = sae.w_dec.row(latent_index).transpose();
    double n = dir.norm();
    if (n > 1e-12) dir /= n;
    Eigen::VectorXd deltas = ckpt.unembed.transpose() * dir;  // per-token logit increase

    std::vector<LogitLensEntry> all;
    all.reserve(static_cast<std::size_t>(deltas.size()));
    for (Eigen::Index t = 0; t < deltas.size(); ++t)
        all.push_back({static_cast<TokenId>(t), vocab().lexeme(static_cast<TokenId>(t)), deltas(t)});
    std::stable_sort(all.begin(), all.end(), [](const LogitLensEntry& a, const LogitLensEntry& b) {
        if (a.logit_increase != b.logit_increase) return a.logit_increase > b.logit_increase;
        return a.token < b.token;
    });
    if (k < static_cast<int>(all.size())) all.resize(static_cast<std::size_t>(k));
    return all;
}

std::vector<ScoredSample> score_problems(const Checkpoint& ckpt,
                                         const std::vector<ProblemSpec>& problems,
                                         const SAEParams& sae, int latent_index,
                                         bool positive_is_correct, double temperature,
                                         std::uint64_t sample_seed, int max_new) {
    std::vector<ScoredSample> out;
    out.reserve(problems.size());
    for (const ProblemSpec& spec : problems) {
        PromptBundle prompt = render_prompt(spec);
        auto recs = capture_final_token_residuals(ckpt, {prompt}, sae.layer);
        Eigen::VectorXd a = sae_encode(recs[0].residual, sae);
        auto gen = generate(ckpt, prompt, temperature, max_new, {}, sample_seed);
        bool correct = evaluate_generation(spec, gen).passed;
        ScoredSample s;
        s.problem_id = spec.id;
        s.score = a(latent_index);
        s.positive = positive_is_correct ? correct : !correct;
        out.push_back(s);
    }
    return out;
}

DetectionReport detection_eval(const Checkpoint& ckpt, const std::vector<ProblemSpec>& problems,
                               const SAEParams& sae, int latent_index, double tau,
                               bool positive_is_correct, double temperature,
                               std::uint64_t sample_seed, int max_new) {
    auto samples = score_problems(ckpt, problems, sae, latent_index, positive_is_correct,
                                  temperature, sample_seed, max_new);
    DetectionReport r = classification_metrics(samples, tau);
    bool has_pos = false, has_neg = false;
    for (const auto& s : samples) (s.positive ? has_pos : has_neg) = true;
    r.auroc = (has_pos && has_neg) ? auroc(samples) : 0.5;
    r.temperature = temperature;
    r.provenance = provenance_name(ckpt.provenance);
    return r;
}

std::vector<SweepEntry> temperature_sweep(const Checkpoint& ckpt,
                                          const std::vector<ProblemSpec>& problems,
                                          const SAEParams& sae, int latent_index, double tau,
                                          bool positive_is_correct,
                                          const std::vector<double>& temperatures,
                                          std::uint64_t sample_seed, int max_new) {
    std::vector<SweepEntry> out;
    for (std::size_t i = 0; i < temperatures.size(); ++i) {
        SweepEntry e;
        e.temperature = temperatures[i];
        e.report = detection_eval(ckpt, problems, sae, latent_index, tau, positive_is_correct,
                                  temperatures[i], sample_seed + i, max_new);
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<double> default_temperature_grid() {
    std::vector<double> t;
    for (int i = 0; i < 8; ++i) t.push_back(0.2 * i);
    return t;
}

}  // namespace scalpel

