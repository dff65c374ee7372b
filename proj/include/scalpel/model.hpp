#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "scalpel/harness.hpp"
#include "scalpel/vocab.hpp"

namespace scalpel {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 0;  // 0 = take from the shared vocabulary
    int max_seq_len = 128;
    std::uint64_t rng_seed = 0;

    int d_head() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }
    void validate() const;
};

enum class Provenance : std::uint8_t { Base = 0, FineTuned = 1, Orthogonalized = 2 };

struct LayerParams {
    Eigen::VectorXd ln1_g, ln1_b;
    Eigen::MatrixXd wq, wk, wv, wo;  // d_model x d_model, rows indexed by input dim
    Eigen::VectorXd bq, bk, bv, bo;
    Eigen::VectorXd ln2_g, ln2_b;
    Eigen::MatrixXd w_fc, w_proj;  // d_model x d_ff, d_ff x d_model
    Eigen::VectorXd b_fc, b_proj;
};

struct Checkpoint {
    ModelConfig cfg;
    Eigen::MatrixXd tok_emb;  // vocab x d_model
    Eigen::MatrixXd pos_emb;  // max_seq_len x d_model
    std::vector<LayerParams> layers;
    Eigen::VectorXd lnf_g, lnf_b;
    Eigen::MatrixXd unembed;  // d_model x vocab
    Provenance provenance = Provenance::Base;
    std::uint64_t base_seed = 0;
    std::string orthogonalized_direction;  // non-empty when provenance == Orthogonalized

    // Visits every trainable parameter block in declared (file) order.
    void visit(const std::function<void(Eigen::MatrixXd&)>& fm,
               const std::function<void(Eigen::VectorXd&)>& fv);
    void visit(const std::function<void(const Eigen::MatrixXd&)>& fm,
               const std::function<void(const Eigen::VectorXd&)>& fv) const;
    // Matrices that write into the residual stream (orthogonalization targets): token and
    // positional embeddings, each attention/MLP output projection, and the
    // output-projection biases (treated as single-row writers).
    void visit_residual_writers(const std::function<void(Eigen::MatrixXd&)>& fm,
                                const std::function<void(Eigen::VectorXd&)>& fv);

    Eigen::VectorXd flatten() const;
    void unflatten(const Eigen::VectorXd& theta);
};

enum class HookKind { Identity, AddDirection, Capture, CaptureAll };
enum class HookPositions { All, FinalPromptToken };

struct HookSpec {
    int layer = 0;
    HookKind kind = HookKind::Identity;
    HookPositions positions = HookPositions::All;
    Eigen::VectorXd direction;  // AddDirection only
    double alpha = 0.0;
};

struct ForwardResult {
    Eigen::MatrixXd logits;                  // seq x vocab
    std::vector<Eigen::VectorXd> captures;   // in hook order, Capture hooks only
};

struct AttentionTrace {
    int layer = 0;
    Eigen::MatrixXd weights;  // n_heads x seq_len, rows sum to 1
};

struct ActivationRecord {
    int problem_id = 0;
    int layer = 0;
    Eigen::VectorXd residual;  // at final prompt token, after block `layer`
    bool label_correct = false;
};

Checkpoint init_checkpoint(const ModelConfig& cfg);

ForwardResult forward(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                      const std::vector<HookSpec>& hooks = {},
                      std::size_t final_prompt_index = SIZE_MAX);

std::vector<TokenId> generate(const Checkpoint& ckpt, const PromptBundle& prompt,
                              double temperature, int max_new,
                              const std::vector<HookSpec>& hooks = {},
                              std::uint64_t sample_seed = 0);

struct TrainOptions {
    int steps = 1000;
    double lr = 1e-3;
    int batch = 8;
    std::uint64_t seed = 0;
    bool verbose = false;
};

struct TrainStats {
    std::vector<double> losses;  // one per step
};

Checkpoint train_lm(const ModelConfig& cfg, const std::vector<std::vector<TokenId>>& corpus,
                    const TrainOptions& opt, TrainStats* stats = nullptr);

Checkpoint fine_tune(const Checkpoint& base, const std::vector<std::vector<TokenId>>& corpus,
                     const TrainOptions& opt, TrainStats* stats = nullptr);

std::vector<ActivationRecord> capture_final_token_residuals(
    const Checkpoint& ckpt, const std::vector<PromptBundle>& prompts, int layer);

AttentionTrace attention_weights(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                                 int layer, const std::vector<HookSpec>& hooks = {});

Checkpoint orthogonalize_checkpoint(const Checkpoint& ckpt, const Eigen::VectorXd& direction,
                                    const std::string& direction_id = "d");

// Cross-entropy loss and analytic gradient (for tests and the trainers).
double lm_loss(const Checkpoint& ckpt, const std::vector<TokenId>& tokens);
double lm_loss_and_grad(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                        Checkpoint& grads);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_activations(const std::vector<ActivationRecord>& records,
                      const std::filesystem::path& path);
std::vector<ActivationRecord> load_activations(const std::filesystem::path& path);

std::string provenance_name(Provenance p);

}  // namespace scalpel
