#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "scalpel/model.hpp"
#include "scalpel/sae.hpp"

namespace scalpel {

struct PipelineError : std::runtime_error {
    int exit_code;
    PipelineError(int code, const std::string& msg) : std::runtime_error(msg), exit_code(code) {}
};
// Exit codes: 0 success, 2 config error, 3 missing/corrupt artifact, 4 numerical failure.
constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitNumerical = 4;

struct RunConfig {
    std::uint64_t seed = 1;
    int n_problems = 220;
    int difficulty_min = 1;
    int difficulty_max = 2;
    int sae_corpus_problems = 600;
    ModelConfig model;
    TrainOptions lm_train{2500, 1e-3, 4, 0, false};
    TrainOptions fine_tune_opts{400, 3e-4, 4, 0, false};
    SAETrainConfig sae_train{8e-3, 0.05, 1e-3, 3000, 32, 0, false};
    int background_tokens = 6000;
    int sae_problem_oversample = 10;  // problem-residual repeats in the SAE mix
    double background_threshold = 0.02;
    std::vector<double> temperature_grid;  // empty = default 0.0..1.4 step 0.2
    // Residual norms in this model are ~4-9, so useful steering coefficients
    // are single digits; the grid must sample that range.
    double alpha_max = 60.0;
    double grid_step = 2.0;
    int max_new = 24;
    bool steer_final_token_only = false;
    int attention_read_offset = 0;
    bool verbose = false;

    static RunConfig load(const std::filesystem::path& path);
    std::string to_json() const;
};

// Content-hash manifest over every emitted artifact. Commands refuse to read
// inputs whose on-disk hash no longer matches the recorded one.
class Manifest {
  public:
    static Manifest load(const std::filesystem::path& out_dir);
    void save() const;
    void record(const std::string& name, const std::string& stage,
                const std::vector<std::string>& inputs);
    // Returns the artifact path after hash verification.
    std::filesystem::path require(const std::string& name) const;
    bool has(const std::string& name) const;

  private:
    std::filesystem::path dir_;
    struct Entry {
        std::string sha256;
        std::string stage;
        std::vector<std::string> inputs;
    };
    std::map<std::string, Entry> entries_;
};

void cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_train_lm(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_fine_tune(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_label(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_capture(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_train_sae(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_select(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_detect(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_steer(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_ortho(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_attention(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_transfer(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_report(const RunConfig& cfg, const std::filesystem::path& out);

// The documented end-to-end sequence, in stage order.
void run_all(const RunConfig& cfg, const std::filesystem::path& out);

// Problem set helpers shared by commands and tests.
std::vector<ProblemSpec> make_problem_set(const RunConfig& cfg);
std::vector<ProblemSpec> make_sae_corpus_problems(const RunConfig& cfg);

}  // namespace scalpel
