#pragma once

#include <limits>
#include <string>
#include <vector>

#include "scalpel/features.hpp"
#include "scalpel/model.hpp"
#include "scalpel/sae.hpp"

namespace scalpel {

struct ScoredSample {
    int problem_id = 0;
    double score = 0.0;  // latent activation at the final prompt token, >= 0
    bool positive = false;
};

struct ConfusionCounts {
    int tp = 0, fp = 0, tn = 0, fn = 0;
    int total() const { return tp + fp + tn + fn; }
};

struct DetectionReport {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double auroc = 0.0;
    ConfusionCounts confusion;
    double temperature = 0.0;
    std::string provenance = "base";
};

double calibrate_threshold(const std::vector<ScoredSample>& calibration);
DetectionReport classification_metrics(const std::vector<ScoredSample>& samples, double tau);
double auroc(const std::vector<ScoredSample>& samples);

struct LogitLensEntry {
    TokenId token;
    std::string lexeme;
    double logit_increase;
};
std::vector<LogitLensEntry> logit_lens(const Checkpoint& ckpt, const SAEParams& sae,
                                       int latent_index, int k = 10);

// f1 from precision/recall with the degenerate conventions used throughout.
double f1_from_pr(double precision, double recall);

// Scores every problem with latent `latent_index` at the final prompt token,
// labels it by regenerating at `temperature`, and reports metrics under the
// frozen threshold tau. positive_is_correct selects which label counts as the
// positive class (correct-predicting vs incorrect-predicting features).
DetectionReport detection_eval(const Checkpoint& ckpt, const std::vector<ProblemSpec>& problems,
                               const SAEParams& sae, int latent_index, double tau,
                               bool positive_is_correct, double temperature,
                               std::uint64_t sample_seed, int max_new = 24);

std::vector<ScoredSample> score_problems(const Checkpoint& ckpt,
                                         const std::vector<ProblemSpec>& problems,
                                         const SAEParams& sae, int latent_index,
                                         bool positive_is_correct, double temperature,
                                         std::uint64_t sample_seed, int max_new = 24);

struct SweepEntry {
    double temperature = 0.0;
    DetectionReport report;
};
std::vector<SweepEntry> temperature_sweep(const Checkpoint& ckpt,
                                          const std::vector<ProblemSpec>& problems,
                                          const SAEParams& sae, int latent_index, double tau,
                                          bool positive_is_correct,
                                          const std::vector<double>& temperatures,
                                          std::uint64_t sample_seed, int max_new = 24);

std::vector<double> default_temperature_grid();  // 0.0, 0.2, ..., 1.4

}  // namespace scalpel
