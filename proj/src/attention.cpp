#include "scalpel/attention.hpp"

#include <algorithm>
#include <stdexcept>

namespace scalpel {

SectionShares section_shares(const AttentionTrace& trace, const PromptBundle& prompt) {
    const Eigen::Index seq = trace.weights.cols();
    if (seq < static_cast<Eigen::Index>(prompt.initiator.end))
        throw std::invalid_argument("trace shorter than the prompt");
    // Mean over heads, then section sums. The BOS token (anything before the
    // description span) is dropped from the denominator so the three sections
    // partition the mass.
    Eigen::RowVectorXd mean = trace.weights.colwise().mean();
    auto span_sum = [&](const Span& s) {
        double acc = 0.0;
        for (std::size_t i = s.begin; i < s.end; ++i) acc += mean(static_cast<Eigen::Index>(i));
        return acc;
    };
    double d = span_sum(prompt.description);
    double t = span_sum(prompt.tests);
    double c = span_sum(prompt.initiator);
    double total = d + t + c;

    SectionShares out;
    out.problem_id = prompt.problem_id;
    out.layer = trace.layer;
    if (total > 0.0) {
        out.description_pct = 100.0 * d / total;
        out.tests_pct = 100.0 * t / total;
        out.initiator_pct = 100.0 * c / total;
    }
    return out;
}

AttentionDelta attention_delta(const std::vector<SectionShares>& baseline,
                               const std::vector<SectionShares>& steered) {
    if (baseline.size() != steered.size() || baseline.empty())
        throw std::invalid_argument("share lists must be nonempty and aligned");
    AttentionDelta delta;
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        if (baseline[i].problem_id != steered[i].problem_id)
            throw std::invalid_argument("unpaired problem ids in attention delta");
        delta.description_pp += steered[i].description_pct - baseline[i].description_pct;
        delta.tests_pp += steered[i].tests_pct - baseline[i].tests_pct;
        delta.initiator_pp += steered[i].initiator_pct - baseline[i].initiator_pct;
    }
    double n = static_cast<double>(baseline.size());
    delta.description_pp /= n;
    delta.tests_pp /= n;
    delta.initiator_pp /= n;
    delta.n_problems = static_cast<int>(baseline.size());
    return delta;
}

AttentionExperiment run_attention_experiment(const Checkpoint& ckpt,
                                             const InterventionSpec& steering,
                                             const std::vector<ProblemSpec>& problems,
                                             int read_layer_offset) {
    int read_layer =
        std::min(steering.layer + read_layer_offset, ckpt.cfg.n_layers - 1);
    HookSpec hook =
        make_steer_hook(steering.direction, steering.alpha, steering.layer, steering.positions);

    AttentionExperiment exp;
    exp.read_layer = read_layer;
    for (const ProblemSpec& spec : problems) {
        PromptBundle prompt = render_prompt(spec);
        AttentionTrace base = attention_weights(ckpt, prompt.tokens, read_layer);
        AttentionTrace steered = attention_weights(ckpt, prompt.tokens, read_layer, {hook});
        SectionShares sb = section_shares(base, prompt);
        sb.condition = "baseline";
        SectionShares ss = section_shares(steered, prompt);
        ss.condition = "steered";
        exp.baseline.push_back(sb);
        exp.steered.push_back(ss);
    }
    exp.delta = attention_delta(exp.baseline, exp.steered);
    return exp;
}

}  // namespace scalpel
