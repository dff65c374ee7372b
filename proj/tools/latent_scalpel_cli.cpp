#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "scalpel/io.hpp"
#include "scalpel/pipeline.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
    CLI::App app{"latent-scalpel: sparse-autoencoder analysis of a toy code model"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    long long seed_override = -1;

    struct Cmd {
        const char* name;
        const char* help;
        void (*fn)(const scalpel::RunConfig&, const fs::path&);
    };
    const Cmd cmds[] = {
        {"gen-data", "Generate the problem set, splits, and vocabulary", scalpel::cmd_gen_data},
        {"train-lm", "Train the base language model", scalpel::cmd_train_lm},
        {"fine-tune", "Continue training on instruction-prefixed data", scalpel::cmd_fine_tune},
        {"label", "Label every problem by greedy generation", scalpel::cmd_label},
        {"capture", "Capture residual activations at every layer", scalpel::cmd_capture},
        {"train-sae", "Train one sparse autoencoder per layer", scalpel::cmd_train_sae},
        {"select", "Select predictive and steering latents", scalpel::cmd_select},
        {"detect", "Evaluate detection with calibrated thresholds", scalpel::cmd_detect},
        {"steer", "Search steering coefficients and run steering", scalpel::cmd_steer},
        {"ortho", "Run weight-orthogonalization ablations", scalpel::cmd_ortho},
        {"attention", "Measure prompt-section attention shifts", scalpel::cmd_attention},
        {"transfer", "Re-run detection/steering on the fine-tuned model", scalpel::cmd_transfer},
        {"report", "Aggregate all stage artifacts into one report", scalpel::cmd_report},
        {"run-all", "Run the full pipeline end to end", scalpel::run_all},
    };

    std::vector<CLI::App*> subs;
    for (const Cmd& c : cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", config_path, "JSON config file (defaults apply if omitted)");
        sub->add_option("--out", out_dir, "Artifact directory");
        sub->add_option("--seed", seed_override, "Override the root seed");
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        scalpel::RunConfig cfg = scalpel::RunConfig::load(
            config_path.empty() ? fs::path{} : fs::path(config_path));
        if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (subs[i]->parsed()) {
                cmds[i].fn(cfg, fs::path(out_dir));
                std::cout << cmds[i].name << ": done\n";
                return 0;
            }
        }
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const scalpel::PipelineError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code;
    } catch (const scalpel::IoError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return scalpel::kExitArtifact;
    } catch (const std::exception& e) {
        std::cerr << "numerical/runtime error: " << e.what() << "\n";
        return scalpel::kExitNumerical;
    }
}
