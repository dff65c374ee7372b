#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "scalpel/sae.hpp"

namespace scalpel {

struct LayerActivationDataset {
    int layer = 0;
    Eigen::MatrixXd activations;  // samples x d_sae, nonnegative
    std::vector<bool> labels;     // true = correct
    std::vector<int> problem_ids;
    int n_correct = 0;
    int n_incorrect = 0;
};

struct FeatureStats {
    int layer = 0;
    int index = 0;
    double t_correct = 0.0, t_incorrect = 0.0;
    double f_correct = 0.0, f_incorrect = 0.0;
    double s_correct = 0.0, s_incorrect = 0.0;
    double background_rate = 0.0;
    bool valid_t = false;    // enough nonzero activations per class for the t-test
    bool background_ok = true;
};

enum class FeatureRole { CorrectPredicting, IncorrectPredicting, CorrectSteering, IncorrectSteering };

struct SelectedFeature {
    FeatureRole role;
    int layer = 0;
    int index = 0;
    double metric = 0.0;
    std::string metric_kind;  // "t-stat" or "sep"
};

struct SelectionResult {
    SelectedFeature correct_predicting;
    SelectedFeature incorrect_predicting;
    SelectedFeature correct_steering;
    SelectedFeature incorrect_steering;
};

struct WelchOptions {
    // Literal reading of the t-statistic: denominators use total class sample counts even
    // though the moments use nonzero activations only. The conventional
    // variant (nonzero counts in the denominators) is behind this flag.
    bool nonzero_counts_in_denominator = false;
};

LayerActivationDataset build_dataset(const std::vector<ActivationRecord>& records,
                                     const SAEParams& sae);

// keep mask: true = latent passes the filter (fires on <= threshold of
// background tokens; strictly-greater rates are excluded).
std::vector<bool> background_filter(const SAEParams& sae,
                                    const std::vector<Eigen::VectorXd>& corpus_residuals,
                                    double threshold = 0.02,
                                    std::vector<double>* rates = nullptr);

std::optional<std::pair<double, double>> welch_t(const LayerActivationDataset& ds, int j,
                                                 const WelchOptions& opt = {});

struct FreqSep {
    double f_correct, f_incorrect, s_correct, s_incorrect;
};
FreqSep frequencies_and_separation(const LayerActivationDataset& ds, int j);

std::vector<FeatureStats> layer_feature_stats(const LayerActivationDataset& ds,
                                              const std::vector<bool>& keep_mask,
                                              const std::vector<double>* background_rates = nullptr,
                                              const WelchOptions& opt = {});

SelectionResult select_features(const std::vector<std::vector<FeatureStats>>& all_layer_stats);

std::string feature_role_name(FeatureRole role);
std::string feature_stats_csv(const std::vector<std::vector<FeatureStats>>& all_layer_stats);

}  // namespace scalpel
