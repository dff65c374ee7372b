#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "scalpel/model.hpp"

namespace scalpel {

struct SAEParams {
    Eigen::MatrixXd w_enc;  // d_model x d_sae
    Eigen::VectorXd b_enc;  // d_sae
    Eigen::VectorXd theta;  // d_sae, per-latent thresholds, >= 0
    Eigen::MatrixXd w_dec;  // d_sae x d_model, unit-norm rows
    Eigen::VectorXd b_dec;  // d_model
    int layer = 0;

    int d_model() const { return static_cast<int>(w_enc.rows()); }
    int d_sae() const { return static_cast<int>(w_enc.cols()); }
};

struct SAETrainConfig {
    double lambda = 1e-3;   // sparsity weight
    double epsilon = 1e-3;  // straight-through rectangle bandwidth
    double lr = 1e-3;
    int steps = 2000;
    int batch = 32;
    std::uint64_t seed = 0;
    bool verbose = false;
};

struct SAELoss {
    double total = 0.0;
    double recon = 0.0;
    double l0 = 0.0;
};

struct PlantedDictionary {
    Eigen::MatrixXd features;        // n_true x d_model, unit rows
    Eigen::VectorXd firing_prob;     // per feature, in (0,1)
    double magnitude_mean = 1.0;     // firing magnitude ~ mean + jitter
    double magnitude_jitter = 0.25;
    double noise_std = 0.0;
};

struct MatchResult {
    double mean_abs_cosine = 0.0;
    // assignment[i] = learned latent matched to true feature i
    std::vector<int> assignment;
    std::vector<double> cosines;
};

Eigen::VectorXd jumprelu(const Eigen::VectorXd& z, const Eigen::VectorXd& theta);
Eigen::VectorXd sae_encode(const Eigen::VectorXd& x, const SAEParams& sae);
Eigen::VectorXd sae_decode(const Eigen::VectorXd& a, const SAEParams& sae);
SAELoss sae_loss(const Eigen::VectorXd& x, const SAEParams& sae, double lambda);

SAEParams init_sae(int d_model, int layer, std::uint64_t seed);
SAEParams train_sae(const std::vector<ActivationRecord>& records, const SAETrainConfig& cfg,
                    std::vector<double>* recon_trace = nullptr);

// Straight-through gradient of the training objective for one sample, flattened
// in (w_enc, b_enc, theta, w_dec, b_dec) order. Exposed for gradient tests.
double sae_loss_and_grad(const Eigen::VectorXd& x, const SAEParams& sae, double lambda,
                         double epsilon, Eigen::VectorXd& grad);
Eigen::VectorXd sae_flatten(const SAEParams& sae);
void sae_unflatten(SAEParams& sae, const Eigen::VectorXd& theta);

PlantedDictionary make_planted_dictionary(int d_model, int n_features, double firing_prob,
                                          double noise_std, std::uint64_t seed);
void generate_superposition_data(const PlantedDictionary& dict, int n, std::uint64_t seed,
                                 Eigen::MatrixXd& activations, Eigen::MatrixXd& true_codes);
MatchResult match_features(const SAEParams& learned, const PlantedDictionary& dict);

void save_sae(const SAEParams& sae, const std::filesystem::path& path);
SAEParams load_sae(const std::filesystem::path& path);

}  // namespace scalpel
