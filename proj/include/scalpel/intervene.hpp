#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scalpel/features.hpp"
#include "scalpel/model.hpp"

namespace scalpel {

enum class InterventionKind { Steer, Orthogonalize };

struct InterventionSpec {
    InterventionKind kind = InterventionKind::Steer;
    int layer = 0;
    int latent_index = 0;
    Eigen::VectorXd direction;  // unit norm
    double alpha = 0.0;         // steer only
    HookPositions positions = HookPositions::All;
};

struct ExperimentReport {
    std::string condition;  // baseline | control | steering_direction
    double correction_rate = 0.0;
    double corruption_rate = 0.0;
    int n_initially_correct = 0;
    int n_initially_incorrect = 0;
    int n_corrected = 0;
    int n_corrupted = 0;
    double mean_token_similarity = 100.0;  // percent, over initially-correct pairs
    std::optional<double> p_vs_baseline_correction, p_vs_baseline_corruption;
    std::optional<double> p_vs_control_correction, p_vs_control_corruption;
    double alpha = 0.0;
};

HookSpec make_steer_hook(const Eigen::VectorXd& direction, double alpha,
                         int layer, HookPositions positions = HookPositions::All);

// Regenerates every problem at T=0 under the intervention (none = baseline)
// and measures correction/corruption against the precomputed baseline labels.
ExperimentReport run_condition(const Checkpoint& ckpt, const std::vector<ProblemSpec>& problems,
                               const std::vector<bool>& baseline_correct,
                               const std::optional<InterventionSpec>& spec,
                               std::uint64_t seed, int max_new = 24);

double token_similarity(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

double objective_correct(const ExperimentReport& r);
double objective_incorrect(const ExperimentReport& r);

struct CoefficientSearchResult {
    double alpha = 0.0;
    double objective = 0.0;
    bool flat_objective = false;
    std::vector<std::pair<double, double>> bracket_trace;  // golden-section [lo, hi] per iteration
    int evaluations = 0;
};

CoefficientSearchResult coefficient_search(const std::function<double(double)>& eval_fn,
                                           double alpha_max, double grid_step = 10.0,
                                           double tol = 0.5);

std::pair<int, int> select_control_feature(const std::vector<std::vector<FeatureStats>>& stats,
                                           double min_fire_rate = 0.10);

double binomial_test_greater(int k, int n, double p0);

struct SteeringExperiment {
    ExperimentReport baseline;
    ExperimentReport control;
    ExperimentReport steering;
};

SteeringExperiment run_steering_experiment(const Checkpoint& ckpt,
                                           const std::vector<ProblemSpec>& problems,
                                           const std::vector<bool>& baseline_correct,
                                           const InterventionSpec& steering,
                                           const InterventionSpec& control,
                                           std::uint64_t seed, int max_new = 24);

SteeringExperiment run_orthogonalization_experiment(const Checkpoint& ckpt,
                                                    const std::vector<ProblemSpec>& problems,
                                                    const std::vector<bool>& baseline_correct,
                                                    const Eigen::VectorXd& steer_direction,
                                                    const Eigen::VectorXd& control_direction,
                                                    std::uint64_t seed, int max_new = 24);

}  // namespace scalpel
