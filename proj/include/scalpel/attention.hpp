#pragma once

#include <string>
#include <vector>

#include "scalpel/intervene.hpp"
#include "scalpel/model.hpp"

namespace scalpel {

struct SectionShares {
    int problem_id = 0;
    int layer = 0;
    std::string condition;
    double description_pct = 0.0;
    double tests_pct = 0.0;
    double initiator_pct = 0.0;
};

struct AttentionDelta {
    double description_pp = 0.0;  // percentage points, steered - baseline
    double tests_pp = 0.0;
    double initiator_pp = 0.0;
    int n_problems = 0;
};

SectionShares section_shares(const AttentionTrace& trace, const PromptBundle& prompt);

AttentionDelta attention_delta(const std::vector<SectionShares>& baseline,
                               const std::vector<SectionShares>& steered);

struct AttentionExperiment {
    std::vector<SectionShares> baseline;
    std::vector<SectionShares> steered;
    AttentionDelta delta;
    int read_layer = 0;
};

// read_layer_offset: 0 reads attention at the steering layer itself (the
// hook writes after the block, so the same-layer read is unaffected by the
// hook); 1 reads one layer downstream where the steering write is visible.
AttentionExperiment run_attention_experiment(const Checkpoint& ckpt,
                                             const InterventionSpec& steering,
                                             const std::vector<ProblemSpec>& problems,
                                             int read_layer_offset = 0);

}  // namespace scalpel
