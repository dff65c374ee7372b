#include "scalpel/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scalpel/attention.hpp"
#include "scalpel/detect.hpp"
#include "scalpel/features.hpp"
#include "scalpel/intervene.hpp"
#include "scalpel/io.hpp"
#include "scalpel/rng.hpp"

namespace scalpel {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- RunConfig

RunConfig RunConfig::load(const fs::path& path) {
    RunConfig cfg;
    if (path.empty()) return cfg;
    json j;
    try {
        std::ifstream is(path);
        if (!is) throw PipelineError(kExitConfig, "cannot open config " + path.string());
        is >> j;
    } catch (const json::exception& e) {
        throw PipelineError(kExitConfig, "bad config JSON: " + std::string(e.what()));
    }
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("seed", cfg.seed);
    get("n_problems", cfg.n_problems);
    get("difficulty_min", cfg.difficulty_min);
    get("difficulty_max", cfg.difficulty_max);
    get("sae_corpus_problems", cfg.sae_corpus_problems);
    if (j.contains("model")) {
        const json& m = j.at("model");
        if (m.contains("n_layers")) cfg.model.n_layers = m.at("n_layers").get<int>();
        if (m.contains("d_model")) cfg.model.d_model = m.at("d_model").get<int>();
        if (m.contains("n_heads")) cfg.model.n_heads = m.at("n_heads").get<int>();
        if (m.contains("max_seq_len")) cfg.model.max_seq_len = m.at("max_seq_len").get<int>();
    }
    auto get_train = [&](const char* key, TrainOptions& t) {
        if (!j.contains(key)) return;
        const json& m = j.at(key);
        if (m.contains("steps")) t.steps = m.at("steps").get<int>();
        if (m.contains("lr")) t.lr = m.at("lr").get<double>();
        if (m.contains("batch")) t.batch = m.at("batch").get<int>();
    };
    get_train("lm_train", cfg.lm_train);
    get_train("fine_tune", cfg.fine_tune_opts);
    if (j.contains("sae_train")) {
        const json& m = j.at("sae_train");
        if (m.contains("lambda")) cfg.sae_train.lambda = m.at("lambda").get<double>();
        if (m.contains("epsilon")) cfg.sae_train.epsilon = m.at("epsilon").get<double>();
        if (m.contains("lr")) cfg.sae_train.lr = m.at("lr").get<double>();
        if (m.contains("steps")) cfg.sae_train.steps = m.at("steps").get<int>();
        if (m.contains("batch")) cfg.sae_train.batch = m.at("batch").get<int>();
    }
    get("background_tokens", cfg.background_tokens);
    get("sae_problem_oversample", cfg.sae_problem_oversample);
    get("background_threshold", cfg.background_threshold);
    get("alpha_max", cfg.alpha_max);
    get("grid_step", cfg.grid_step);
    get("max_new", cfg.max_new);
    get("steer_final_token_only", cfg.steer_final_token_only);
    get("attention_read_offset", cfg.attention_read_offset);
    get("verbose", cfg.verbose);
    if (j.contains("temperature_grid"))
        cfg.temperature_grid = j.at("temperature_grid").get<std::vector<double>>();
    if (cfg.n_problems < 10 || cfg.difficulty_min < 1 || cfg.difficulty_max > 4 ||
        cfg.difficulty_min > cfg.difficulty_max)
        throw PipelineError(kExitConfig, "invalid dataset parameters");
    return cfg;
}

std::string RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["n_problems"] = n_problems;
    j["difficulty_min"] = difficulty_min;
    j["difficulty_max"] = difficulty_max;
    j["sae_corpus_problems"] = sae_corpus_problems;
    j["model"] = {{"n_layers", model.n_layers},
                  {"d_model", model.d_model},
                  {"n_heads", model.n_heads},
                  {"max_seq_len", model.max_seq_len}};
    j["lm_train"] = {{"steps", lm_train.steps}, {"lr", lm_train.lr}, {"batch", lm_train.batch}};
    j["fine_tune"] = {{"steps", fine_tune_opts.steps},
                      {"lr", fine_tune_opts.lr},
                      {"batch", fine_tune_opts.batch}};
    j["sae_train"] = {{"lambda", sae_train.lambda},
                      {"epsilon", sae_train.epsilon},
                      {"lr", sae_train.lr},
                      {"steps", sae_train.steps},
                      {"batch", sae_train.batch}};
    j["background_tokens"] = background_tokens;
    j["sae_problem_oversample"] = sae_problem_oversample;
    j["background_threshold"] = background_threshold;
    j["alpha_max"] = alpha_max;
    j["grid_step"] = grid_step;
    j["max_new"] = max_new;
    j["steer_final_token_only"] = steer_final_token_only;
    j["attention_read_offset"] = attention_read_offset;
    return j.dump(2);
}

// ----------------------------------------------------------------- Manifest

Manifest Manifest::load(const fs::path& out_dir) {
    Manifest m;
    m.dir_ = out_dir;
    fs::create_directories(out_dir);
    fs::path mf = out_dir / "manifest.json";
    if (fs::exists(mf)) {
        json j;
        std::ifstream is(mf);
        is >> j;
        for (auto& [name, e] : j.at("artifacts").items()) {
            Entry entry;
            entry.sha256 = e.at("sha256").get<std::string>();
            entry.stage = e.at("stage").get<std::string>();
            entry.inputs = e.at("inputs").get<std::vector<std::string>>();
            m.entries_[name] = entry;
        }
    }
    return m;
}

void Manifest::save() const {
    json arts = json::object();
    for (const auto& [name, e] : entries_)
        arts[name] = {{"sha256", e.sha256}, {"stage", e.stage}, {"inputs", e.inputs}};
    json j;
    j["artifacts"] = arts;
    write_file(dir_ / "manifest.json", j.dump(2) + "\n");
}

void Manifest::record(const std::string& name, const std::string& stage,
                      const std::vector<std::string>& inputs) {
    fs::path p = dir_ / name;
    if (!fs::exists(p)) throw PipelineError(kExitArtifact, "artifact not written: " + name);
    Entry e;
    e.sha256 = sha256_file(p);
    e.stage = stage;
    e.inputs = inputs;
    entries_[name] = e;
}

fs::path Manifest::require(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw PipelineError(kExitArtifact, "missing artifact (not in manifest): " + name);
    fs::path p = dir_ / name;
    if (!fs::exists(p)) throw PipelineError(kExitArtifact, "missing artifact file: " + name);
    if (sha256_file(p) != it->second.sha256)
        throw PipelineError(kExitArtifact, "artifact hash mismatch (corrupt?): " + name);
    return p;
}

bool Manifest::has(const std::string& name) const { return entries_.count(name) != 0; }

// ------------------------------------------------------------------ helpers

namespace {

int problem_difficulty(const RunConfig& cfg, int id) {
    int span = cfg.difficulty_max - cfg.difficulty_min + 1;
    return cfg.difficulty_min + id % span;
}

std::vector<TokenId> training_sequence(const ProblemSpec& spec) {
    PromptBundle p = render_prompt(spec);
    std::vector<TokenId> seq = p.tokens;
    seq.insert(seq.end(), spec.target_tokens.begin(), spec.target_tokens.end());
    seq.push_back(vocab().eos());
    return seq;
}

std::vector<TokenId> instruct_sequence(const ProblemSpec& spec) {
    // Fine-tune split uses an instruction-marker prefix after BOS.
    std::vector<TokenId> seq = training_sequence(spec);
    seq.insert(seq.begin() + 1, vocab().instruct());
    return seq;
}

std::string acts_name(int layer) { return "acts_l" + std::to_string(layer) + ".bin"; }
std::string sae_acts_name(int layer) { return "sae_acts_l" + std::to_string(layer) + ".bin"; }
std::string bg_name(int layer) { return "bg_l" + std::to_string(layer) + ".bin"; }
std::string sae_name(int layer) { return "sae_l" + std::to_string(layer) + ".bin"; }

std::vector<ProblemSpec> problems_by_ids(const RunConfig& cfg, const std::vector<int>& ids) {
    std::vector<ProblemSpec> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(generate_problem(cfg.seed, id, problem_difficulty(cfg, id)));
    return out;
}

SplitAssignment load_splits(const Manifest& m) {
    json j;
    std::ifstream is(m.require("splits.json"));
    is >> j;
    SplitAssignment s;
    s.selection_ids = j.at("selection_ids").get<std::vector<int>>();
    s.calibration_ids = j.at("calibration_ids").get<std::vector<int>>();
    s.analysis_ids = j.at("analysis_ids").get<std::vector<int>>();
    return s;
}

std::map<int, bool> load_labels(const Manifest& m) {
    json j;
    std::ifstream is(m.require("labels.json"));
    is >> j;
    std::map<int, bool> out;
    for (const json& e : j.at("labels")) out[e.at("id").get<int>()] = e.at("passed").get<bool>();
    return out;
}

json load_json_artifact(const Manifest& m, const std::string& name) {
    json j;
    std::ifstream is(m.require(name));
    is >> j;
    return j;
}

std::vector<double> temperature_grid_of(const RunConfig& cfg) {
    return cfg.temperature_grid.empty() ? default_temperature_grid() : cfg.temperature_grid;
}

Eigen::VectorXd latent_direction(const SAEParams& sae, int index) {
    Eigen::VectorXd d = sae.w_dec.row(index).transpose();
    double n = d.norm();
    if (n < 1e-12) throw PipelineError(kExitNumerical, "degenerate latent direction");
    return d / n;
}

json report_to_json(const ExperimentReport& r) {
    json j;
    j["condition"] = r.condition;
    j["correction_rate"] = r.correction_rate;
    j["corruption_rate"] = r.corruption_rate;
    j["n_initially_correct"] = r.n_initially_correct;
    j["n_initially_incorrect"] = r.n_initially_incorrect;
    j["n_corrected"] = r.n_corrected;
    j["n_corrupted"] = r.n_corrupted;
    j["mean_token_similarity"] = r.mean_token_similarity;
    j["alpha"] = r.alpha;
    if (r.p_vs_baseline_correction) j["p_vs_baseline_correction"] = *r.p_vs_baseline_correction;
    if (r.p_vs_baseline_corruption) j["p_vs_baseline_corruption"] = *r.p_vs_baseline_corruption;
    if (r.p_vs_control_correction) j["p_vs_control_correction"] = *r.p_vs_control_correction;
    if (r.p_vs_control_corruption) j["p_vs_control_corruption"] = *r.p_vs_control_corruption;
    return j;
}

double threshold_from_json(const json& v) {
    if (v.is_number()) return v.get<double>();
    return v.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                         : -std::numeric_limits<double>::infinity();
}

json finite_or_string(double v) {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : "-inf";
}

json detection_to_json(const DetectionReport& r) {
    json j;
    j["threshold"] = finite_or_string(r.threshold);
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["auroc"] = r.auroc;
    j["temperature"] = r.temperature;
    j["provenance"] = r.provenance;
    j["confusion"] = {{"tp", r.confusion.tp},
                      {"fp", r.confusion.fp},
                      {"tn", r.confusion.tn},
                      {"fn", r.confusion.fn}};
    return j;
}

struct SelectionInfo {
    SelectionResult sel;
    std::pair<int, int> control;
};

SelectionInfo load_selection(const Manifest& m) {
    json j = load_json_artifact(m, "selection.json");
    auto parse = [&](const char* key, FeatureRole role) {
        const json& e = j.at("selection").at(key);
        SelectedFeature f;
        f.role = role;
        f.layer = e.at("layer").get<int>();
        f.index = e.at("index").get<int>();
        f.metric = e.at("metric").get<double>();
        f.metric_kind = e.at("metric_kind").get<std::string>();
        return f;
    };
    SelectionInfo info;
    info.sel.correct_predicting = parse("correct_predicting", FeatureRole::CorrectPredicting);
    info.sel.incorrect_predicting = parse("incorrect_predicting", FeatureRole::IncorrectPredicting);
    info.sel.correct_steering = parse("correct_steering", FeatureRole::CorrectSteering);
    info.sel.incorrect_steering = parse("incorrect_steering", FeatureRole::IncorrectSteering);
    info.control = {j.at("control").at("layer").get<int>(), j.at("control").at("index").get<int>()};
    return info;
}

std::vector<bool> baseline_labels_for(const std::map<int, bool>& labels,
                                      const std::vector<ProblemSpec>& problems) {
    std::vector<bool> out;
    out.reserve(problems.size());
    for (const auto& p : problems) {
        auto it = labels.find(p.id);
        if (it == labels.end())
            throw PipelineError(kExitArtifact, "missing label for problem " + std::to_string(p.id));
        out.push_back(it->second);
    }
    return out;
}

}  // namespace

std::vector<ProblemSpec> make_problem_set(const RunConfig& cfg) {
    std::vector<ProblemSpec> out;
    out.reserve(static_cast<std::size_t>(cfg.n_problems));
    for (int id = 0; id < cfg.n_problems; ++id)
        out.push_back(generate_problem(cfg.seed, id, problem_difficulty(cfg, id)));
    return out;
}

std::vector<ProblemSpec> make_sae_corpus_problems(const RunConfig& cfg) {
    std::vector<ProblemSpec> out;
    out.reserve(static_cast<std::size_t>(cfg.sae_corpus_problems));
    for (int i = 0; i < cfg.sae_corpus_problems; ++i) {
        int id = cfg.n_problems + i;
        out.push_back(generate_problem(cfg.seed, id, problem_difficulty(cfg, id)));
    }
    return out;
}

// ----------------------------------------------------------------- commands

void cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    auto problems = make_problem_set(cfg);
    std::vector<int> ids;
    for (const auto& p : problems) ids.push_back(p.id);
    SplitAssignment splits = split_dataset(ids, cfg.seed);

    std::set<int> sel(splits.selection_ids.begin(), splits.selection_ids.end());
    std::set<int> cal(splits.calibration_ids.begin(), splits.calibration_ids.end());

    json parr = json::array();
    for (const auto& p : problems) {
        json tests = json::array();
        for (const auto& t : p.tests) tests.push_back({{"in", t.input}, {"out", t.expected}});
        parr.push_back({{"id", p.id},
                        {"description_tokens", p.description},
                        {"function_name", p.function_name},
                        {"tests", tests},
                        {"difficulty", p.difficulty},
                        {"target_tokens", p.target_tokens},
                        {"split", sel.count(p.id) ? "selection"
                                  : cal.count(p.id) ? "calibration"
                                                    : "analysis"}});
    }
    write_file(out / "problems.json", json{{"problems", parr}}.dump(2) + "\n");
    write_file(out / "splits.json", json{{"selection_ids", splits.selection_ids},
                                         {"calibration_ids", splits.calibration_ids},
                                         {"analysis_ids", splits.analysis_ids}}
                                        .dump(2) +
                                        "\n");
    write_file(out / "vocab.json", json(vocab().all_lexemes()).dump(2) + "\n");
    write_file(out / "config.json", cfg.to_json() + "\n");
    m.record("problems.json", "gen_data", {});
    m.record("splits.json", "gen_data", {});
    m.record("vocab.json", "gen_data", {});
    m.record("config.json", "gen_data", {});
    m.save();
}

void cmd_train_lm(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    m.require("problems.json");
    std::vector<std::vector<TokenId>> corpus;
    for (const auto& p : make_problem_set(cfg)) corpus.push_back(training_sequence(p));
    ModelConfig mc = cfg.model;
    mc.rng_seed = substream_seed(cfg.seed, "lm");
    TrainOptions opt = cfg.lm_train;
    opt.seed = substream_seed(cfg.seed, "lm-data");
    opt.verbose = cfg.verbose;
    Checkpoint ckpt = train_lm(mc, corpus, opt);
    save_checkpoint(ckpt, out / "lm_base.bin");
    m.record("lm_base.bin", "train_lm", {"problems.json"});
    m.save();
}

void cmd_fine_tune(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint base = load_checkpoint(m.require("lm_base.bin"));
    std::vector<std::vector<TokenId>> corpus;
    for (const auto& p : make_problem_set(cfg)) corpus.push_back(instruct_sequence(p));
    TrainOptions opt = cfg.fine_tune_opts;
    opt.seed = substream_seed(cfg.seed, "finetune-data");
    opt.verbose = cfg.verbose;
    Checkpoint tuned = fine_tune(base, corpus, opt);
    save_checkpoint(tuned, out / "lm_tuned.bin");
    m.record("lm_tuned.bin", "fine_tune", {"lm_base.bin"});
    m.save();
}

void cmd_label(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    json arr = json::array();
    int n_passed = 0, n_d1 = 0, n_d1_passed = 0;
    for (const auto& spec : make_problem_set(cfg)) {
        PromptBundle prompt = render_prompt(spec);
        auto gen = generate(ckpt, prompt, 0.0, cfg.max_new, {}, cfg.seed);
        LabeledSample s = evaluate_generation(spec, gen);
        arr.push_back({{"id", s.problem_id},
                       {"passed", s.passed},
                       {"per_test", json::array({s.per_test[0], s.per_test[1], s.per_test[2]})},
                       {"failure_kind", failure_kind_name(s.failure_kind)},
                       {"generated_tokens", s.generated_tokens}});
        n_passed += s.passed;
        if (spec.difficulty == 1) {
            ++n_d1;
            n_d1_passed += s.passed;
        }
    }
    json j;
    j["labels"] = arr;
    j["pass_rate"] = static_cast<double>(n_passed) / cfg.n_problems;
    j["difficulty1_pass_rate"] = n_d1 ? static_cast<double>(n_d1_passed) / n_d1 : 0.0;
    write_file(out / "labels.json", j.dump(2) + "\n");
    m.record("labels.json", "label", {"lm_base.bin", "problems.json"});
    m.save();
}

void cmd_capture(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    auto labels = load_labels(m);
    const int L = ckpt.cfg.n_layers;

    // One forward per prompt captures every layer's final-token residual.
    auto capture_prompt = [&](const PromptBundle& prompt) {
        std::vector<HookSpec> hooks(static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) {
            hooks[static_cast<std::size_t>(l)].layer = l;
            hooks[static_cast<std::size_t>(l)].kind = HookKind::Capture;
            hooks[static_cast<std::size_t>(l)].positions = HookPositions::FinalPromptToken;
        }
        return forward(ckpt, prompt.tokens, hooks, prompt.tokens.size() - 1).captures;
    };

    std::vector<std::vector<ActivationRecord>> acts(static_cast<std::size_t>(L));
    for (const auto& spec : make_problem_set(cfg)) {
        auto caps = capture_prompt(render_prompt(spec));
        for (int l = 0; l < L; ++l) {
            ActivationRecord rec;
            rec.problem_id = spec.id;
            rec.layer = l;
            rec.residual = caps[static_cast<std::size_t>(l)];
            rec.label_correct = labels.at(spec.id);
            acts[static_cast<std::size_t>(l)].push_back(std::move(rec));
        }
    }
    std::vector<std::vector<ActivationRecord>> sae_acts(static_cast<std::size_t>(L));
    for (const auto& spec : make_sae_corpus_problems(cfg)) {
        auto caps = capture_prompt(render_prompt(spec));
        for (int l = 0; l < L; ++l) {
            ActivationRecord rec;
            rec.problem_id = spec.id;
            rec.layer = l;
            rec.residual = caps[static_cast<std::size_t>(l)];
            sae_acts[static_cast<std::size_t>(l)].push_back(std::move(rec));
        }
    }

    // Background stream: residuals at every position of fixed-size windows.
    std::vector<std::vector<ActivationRecord>> bg(static_cast<std::size_t>(L));
    auto corpus = build_background_corpus(substream_seed(cfg.seed, "bg"),
                                          static_cast<std::size_t>(cfg.background_tokens));
    const std::size_t window = std::min<std::size_t>(64, static_cast<std::size_t>(cfg.model.max_seq_len));
    for (std::size_t at = 0; at + window <= corpus.size(); at += window) {
        std::vector<TokenId> chunk(corpus.begin() + static_cast<std::ptrdiff_t>(at),
                                   corpus.begin() + static_cast<std::ptrdiff_t>(at + window));
        std::vector<HookSpec> hooks(static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) {
            hooks[static_cast<std::size_t>(l)].layer = l;
            hooks[static_cast<std::size_t>(l)].kind = HookKind::CaptureAll;
        }
        auto caps = forward(ckpt, chunk, hooks).captures;
        for (int l = 0; l < L; ++l)
            for (std::size_t i = 0; i < window; ++i) {
                ActivationRecord rec;
                rec.problem_id = -1;
                rec.layer = l;
                rec.residual = caps[static_cast<std::size_t>(l) * window + i];
                bg[static_cast<std::size_t>(l)].push_back(std::move(rec));
            }
    }

    for (int l = 0; l < L; ++l) {
        save_activations(acts[static_cast<std::size_t>(l)], out / acts_name(l));
        save_activations(sae_acts[static_cast<std::size_t>(l)], out / sae_acts_name(l));
        save_activations(bg[static_cast<std::size_t>(l)], out / bg_name(l));
        m.record(acts_name(l), "capture", {"lm_base.bin", "labels.json"});
        m.record(sae_acts_name(l), "capture", {"lm_base.bin"});
        m.record(bg_name(l), "capture", {"lm_base.bin"});
    }
    m.save();
}

void cmd_train_sae(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    const int L = cfg.model.n_layers;
    for (int l = 0; l < L; ++l) {
        // Mix problem residuals with general-stream residuals so the general
        // distribution is in-distribution for the SAE; latents that absorb it
        // fire often there and are removed by the background filter. Problem
        // residuals are repeated so task structure gets enough latent budget.
        auto problem_records = load_activations(m.require(sae_acts_name(l)));
        auto records = load_activations(m.require(bg_name(l)));
        for (int rep = 0; rep < cfg.sae_problem_oversample; ++rep)
            records.insert(records.end(), problem_records.begin(), problem_records.end());
        SAETrainConfig sc = cfg.sae_train;
        sc.seed = substream_seed(cfg.seed, "sae-l" + std::to_string(l));
        sc.verbose = cfg.verbose;
        SAEParams sae = train_sae(records, sc);
        save_sae(sae, out / sae_name(l));
        json sidecar = {{"layer", l},
                        {"lambda", sc.lambda},
                        {"epsilon", sc.epsilon},
                        {"seed", sc.seed},
                        {"steps", sc.steps}};
        write_file(out / (sae_name(l) + ".json"), sidecar.dump(2) + "\n");
        m.record(sae_name(l), "train_sae", {sae_acts_name(l)});
        m.record(sae_name(l) + ".json", "train_sae", {sae_acts_name(l)});
    }
    m.save();
}

void cmd_select(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    SplitAssignment splits = load_splits(m);
    std::set<int> selection(splits.selection_ids.begin(), splits.selection_ids.end());
    const int L = cfg.model.n_layers;

    std::vector<std::vector<FeatureStats>> all_stats;
    for (int l = 0; l < L; ++l) {
        SAEParams sae = load_sae(m.require(sae_name(l)));
        auto records = load_activations(m.require(acts_name(l)));
        std::vector<ActivationRecord> subset;
        for (auto& r : records)
            if (selection.count(r.problem_id)) subset.push_back(r);
        LayerActivationDataset ds = build_dataset(subset, sae);

        auto bg_records = load_activations(m.require(bg_name(l)));
        std::vector<Eigen::VectorXd> bg_res;
        bg_res.reserve(bg_records.size());
        for (auto& r : bg_records) bg_res.push_back(r.residual);
        std::vector<double> rates;
        auto keep = background_filter(sae, bg_res, cfg.background_threshold, &rates);
        all_stats.push_back(layer_feature_stats(ds, keep, &rates));
    }
    SelectionResult sel = select_features(all_stats);
    auto control = select_control_feature(all_stats);

    auto sel_json = [](const SelectedFeature& f) {
        return json{{"role", feature_role_name(f.role)},
                    {"layer", f.layer},
                    {"index", f.index},
                    {"metric", f.metric},
                    {"metric_kind", f.metric_kind}};
    };
    json j;
    j["selection"] = {{"correct_predicting", sel_json(sel.correct_predicting)},
                      {"incorrect_predicting", sel_json(sel.incorrect_predicting)},
                      {"correct_steering", sel_json(sel.correct_steering)},
                      {"incorrect_steering", sel_json(sel.incorrect_steering)}};
    j["control"] = {{"layer", control.first}, {"index", control.second}};
    write_file(out / "selection.json", j.dump(2) + "\n");
    write_file(out / "features.csv", feature_stats_csv(all_stats));
    std::vector<std::string> inputs = {"splits.json"};
    for (int l = 0; l < L; ++l) {
        inputs.push_back(sae_name(l));
        inputs.push_back(acts_name(l));
        inputs.push_back(bg_name(l));
    }
    m.record("selection.json", "select", inputs);
    m.record("features.csv", "select", inputs);
    m.save();
}

namespace {

struct PredictorEval {
    double tau = 0.0;
    DetectionReport analysis;
    std::vector<SweepEntry> sweep;
};

PredictorEval eval_predictor(const RunConfig& cfg, const Manifest& m, const Checkpoint& ckpt,
                             const SelectedFeature& feature, bool positive_is_correct) {
    SAEParams sae = load_sae(m.require(sae_name(feature.layer)));
    SplitAssignment splits = load_splits(m);
    auto labels = load_labels(m);

    auto scored = [&](const std::vector<int>& ids) {
        std::set<int> want(ids.begin(), ids.end());
        auto records = load_activations(m.require(acts_name(feature.layer)));
        std::vector<ScoredSample> out;
        for (const auto& r : records) {
            if (!want.count(r.problem_id)) continue;
            ScoredSample s;
            s.problem_id = r.problem_id;
            s.score = sae_encode(r.residual, sae)(feature.index);
            bool correct = labels.at(r.problem_id);
            s.positive = positive_is_correct ? correct : !correct;
            out.push_back(s);
        }
        return out;
    };

    PredictorEval ev;
    ev.tau = calibrate_threshold(scored(splits.calibration_ids));
    auto analysis_samples = scored(splits.analysis_ids);
    ev.analysis = classification_metrics(analysis_samples, ev.tau);
    ev.analysis.auroc = auroc(analysis_samples);
    ev.analysis.provenance = provenance_name(ckpt.provenance);

    auto problems = problems_by_ids(cfg, splits.analysis_ids);
    ev.sweep = temperature_sweep(ckpt, problems, sae, feature.index, ev.tau, positive_is_correct,
                                 temperature_grid_of(cfg), substream_seed(cfg.seed, "sweep"),
                                 cfg.max_new);
    return ev;
}

}  // namespace

void cmd_detect(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    SelectionInfo info = load_selection(m);

    PredictorEval correct_ev = eval_predictor(cfg, m, ckpt, info.sel.correct_predicting, true);
    PredictorEval incorrect_ev =
        eval_predictor(cfg, m, ckpt, info.sel.incorrect_predicting, false);

    auto lens_json = [&](const SelectedFeature& f) {
        SAEParams sae = load_sae(m.require(sae_name(f.layer)));
        json arr = json::array();
        for (const auto& e : logit_lens(ckpt, sae, f.index, 10))
            arr.push_back({{"token", e.token}, {"lexeme", e.lexeme}, {"logit_increase", e.logit_increase}});
        return arr;
    };

    auto pred_json = [&](const PredictorEval& ev, const SelectedFeature& f) {
        json sweep = json::array();
        for (const auto& e : ev.sweep) {
            json r = detection_to_json(e.report);
            sweep.push_back(r);
        }
        return json{{"feature", {{"layer", f.layer}, {"index", f.index}}},
                    {"threshold", finite_or_string(ev.tau)},
                    {"analysis", detection_to_json(ev.analysis)},
                    {"temperature_sweep", sweep},
                    {"logit_lens", lens_json(f)}};
    };

    json j;
    j["correct_predicting"] = pred_json(correct_ev, info.sel.correct_predicting);
    j["incorrect_predicting"] = pred_json(incorrect_ev, info.sel.incorrect_predicting);
    write_file(out / "detection.json", j.dump(2) + "\n");

    std::ostringstream csv;
    csv << "feature,temperature,auroc,f1,precision,recall\n";
    csv.precision(12);
    auto emit = [&](const char* name, const PredictorEval& ev) {
        for (const auto& e : ev.sweep)
            csv << name << ',' << e.temperature << ',' << e.report.auroc << ',' << e.report.f1
                << ',' << e.report.precision << ',' << e.report.recall << '\n';
    };
    emit("correct_predicting", correct_ev);
    emit("incorrect_predicting", incorrect_ev);
    write_file(out / "detection_sweep.csv", csv.str());

    m.record("detection.json", "detect",
             {"lm_base.bin", "selection.json", "splits.json", "labels.json"});
    m.record("detection_sweep.csv", "detect", {"detection.json"});
    m.save();
}

namespace {

InterventionSpec steer_spec(const RunConfig& cfg, const Manifest& m, const SelectedFeature& f,
                            double alpha) {
    SAEParams sae = load_sae(m.require(sae_name(f.layer)));
    InterventionSpec s;
    s.kind = InterventionKind::Steer;
    s.layer = f.layer;
    s.latent_index = f.index;
    s.direction = latent_direction(sae, f.index);
    s.alpha = alpha;
    s.positions =
        cfg.steer_final_token_only ? HookPositions::FinalPromptToken : HookPositions::All;
    return s;
}

json experiment_to_json(const SteeringExperiment& exp) {
    return json{{"baseline", report_to_json(exp.baseline)},
                {"control", report_to_json(exp.control)},
                {"steering", report_to_json(exp.steering)}};
}

}  // namespace

void cmd_steer(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    SelectionInfo info = load_selection(m);
    SplitAssignment splits = load_splits(m);
    auto labels = load_labels(m);

    auto cal_problems = problems_by_ids(cfg, splits.calibration_ids);
    auto cal_baseline = baseline_labels_for(labels, cal_problems);
    auto an_problems = problems_by_ids(cfg, splits.analysis_ids);
    auto an_baseline = baseline_labels_for(labels, an_problems);
    std::uint64_t seed = substream_seed(cfg.seed, "steer");

    // Control feature shares the comparison arm's coefficient.
    SelectedFeature control_feat;
    control_feat.layer = info.control.first;
    control_feat.index = info.control.second;

    auto search_and_run = [&](const SelectedFeature& f, bool correct_arm) {
        auto objective = correct_arm ? objective_correct : objective_incorrect;
        auto eval_fn = [&](double alpha) {
            InterventionSpec s = steer_spec(cfg, m, f, alpha);
            ExperimentReport r = run_condition(ckpt, cal_problems, cal_baseline, s, seed, cfg.max_new);
            return objective(r);
        };
        CoefficientSearchResult search =
            coefficient_search(eval_fn, cfg.alpha_max, cfg.grid_step);
        InterventionSpec steering = steer_spec(cfg, m, f, search.alpha);
        InterventionSpec control = steer_spec(cfg, m, control_feat, search.alpha);
        SteeringExperiment exp = run_steering_experiment(ckpt, an_problems, an_baseline, steering,
                                                         control, seed, cfg.max_new);
        json j = experiment_to_json(exp);
        j["alpha"] = search.alpha;
        j["search"] = {{"objective", search.objective},
                       {"flat_objective", search.flat_objective},
                       {"evaluations", search.evaluations}};
        j["feature"] = {{"layer", f.layer}, {"index", f.index}};
        j["control_feature"] = {{"layer", control_feat.layer}, {"index", control_feat.index}};
        j["control_alpha_matches_steering"] = true;
        return j;
    };

    json j;
    j["correct_steering"] = search_and_run(info.sel.correct_steering, true);
    j["incorrect_steering"] = search_and_run(info.sel.incorrect_steering, false);
    write_file(out / "steering.json", j.dump(2) + "\n");

    // Per-problem audit trail for the correct arm.
    m.record("steering.json", "steer",
             {"lm_base.bin", "selection.json", "splits.json", "labels.json"});
    m.save();
}

void cmd_ortho(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    SelectionInfo info = load_selection(m);
    SplitAssignment splits = load_splits(m);
    auto labels = load_labels(m);
    auto an_problems = problems_by_ids(cfg, splits.analysis_ids);
    auto an_baseline = baseline_labels_for(labels, an_problems);
    std::uint64_t seed = substream_seed(cfg.seed, "ortho");

    SAEParams control_sae = load_sae(m.require(sae_name(info.control.first)));
    Eigen::VectorXd control_dir = latent_direction(control_sae, info.control.second);

    auto run_arm = [&](const SelectedFeature& f) {
        SAEParams sae = load_sae(m.require(sae_name(f.layer)));
        Eigen::VectorXd dir = latent_direction(sae, f.index);
        SteeringExperiment exp = run_orthogonalization_experiment(ckpt, an_problems, an_baseline,
                                                                  dir, control_dir, seed, cfg.max_new);
        json j = experiment_to_json(exp);
        j["feature"] = {{"layer", f.layer}, {"index", f.index}};
        return j;
    };

    json j;
    j["correct_orthogonalization"] = run_arm(info.sel.correct_steering);
    j["incorrect_orthogonalization"] = run_arm(info.sel.incorrect_steering);
    j["control_feature"] = {{"layer", info.control.first}, {"index", info.control.second}};
    write_file(out / "ortho.json", j.dump(2) + "\n");
    m.record("ortho.json", "ortho",
             {"lm_base.bin", "selection.json", "splits.json", "labels.json"});
    m.save();
}

void cmd_attention(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint ckpt = load_checkpoint(m.require("lm_base.bin"));
    SelectionInfo info = load_selection(m);
    SplitAssignment splits = load_splits(m);
    json steering = load_json_artifact(m, "steering.json");
    auto an_problems = problems_by_ids(cfg, splits.analysis_ids);

    std::ostringstream csv;
    csv << "problem_id,arm,condition,description_pct,tests_pct,initiator_pct\n";
    csv.precision(12);

    auto run_arm = [&](const char* arm, const SelectedFeature& f, double alpha) {
        InterventionSpec s = steer_spec(cfg, m, f, alpha);
        AttentionExperiment exp =
            run_attention_experiment(ckpt, s, an_problems, cfg.attention_read_offset);
        for (const auto& shares : {exp.baseline, exp.steered})
            for (const SectionShares& sh : shares)
                csv << sh.problem_id << ',' << arm << ',' << sh.condition << ','
                    << sh.description_pct << ',' << sh.tests_pct << ',' << sh.initiator_pct << '\n';
        return json{{"feature", {{"layer", f.layer}, {"index", f.index}}},
                    {"alpha", alpha},
                    {"read_layer", exp.read_layer},
                    {"delta_pp",
                     {{"description", exp.delta.description_pp},
                      {"tests", exp.delta.tests_pp},
                      {"initiator", exp.delta.initiator_pp}}},
                    {"n_problems", exp.delta.n_problems}};
    };

    json j;
    j["correct_steering"] =
        run_arm("correct", info.sel.correct_steering,
                steering.at("correct_steering").at("alpha").get<double>());
    j["incorrect_steering"] =
        run_arm("incorrect", info.sel.incorrect_steering,
                steering.at("incorrect_steering").at("alpha").get<double>());
    write_file(out / "attention.json", j.dump(2) + "\n");
    write_file(out / "attention.csv", csv.str());
    m.record("attention.json", "attention",
             {"lm_base.bin", "selection.json", "steering.json", "splits.json"});
    m.record("attention.csv", "attention", {"attention.json"});
    m.save();
}

void cmd_transfer(const RunConfig& cfg, const fs::path& out) {
    Manifest m = Manifest::load(out);
    Checkpoint base = load_checkpoint(m.require("lm_base.bin"));
    Checkpoint tuned = load_checkpoint(m.require("lm_tuned.bin"));
    if (tuned.provenance != Provenance::FineTuned)
        throw PipelineError(kExitArtifact, "lm_tuned.bin has wrong provenance");
    if (tuned.cfg.d_model != base.cfg.d_model || tuned.cfg.vocab_size != base.cfg.vocab_size ||
        tuned.cfg.n_layers != base.cfg.n_layers)
        throw PipelineError(kExitConfig, "base/tuned config mismatch");

    SelectionInfo info = load_selection(m);
    SplitAssignment splits = load_splits(m);
    json detection = load_json_artifact(m, "detection.json");
    json steering = load_json_artifact(m, "steering.json");
    auto an_problems = problems_by_ids(cfg, splits.analysis_ids);
    std::uint64_t seed = substream_seed(cfg.seed, "transfer");

    // Frozen threshold, frozen feature, base-trained SAE, tuned checkpoint.
    const SelectedFeature& pred = info.sel.incorrect_predicting;
    SAEParams pred_sae = load_sae(m.require(sae_name(pred.layer)));
    double tau = threshold_from_json(detection.at("incorrect_predicting").at("threshold"));
    DetectionReport tuned_det = detection_eval(tuned, an_problems, pred_sae, pred.index, tau,
                                               /*positive_is_correct=*/false, 0.0, seed, cfg.max_new);
    tuned_det.provenance = provenance_name(tuned.provenance);

    // Frozen steering coefficient on the tuned model's own baseline labels.
    double alpha = steering.at("correct_steering").at("alpha").get<double>();
    std::vector<bool> tuned_baseline;
    for (const auto& spec : an_problems) {
        auto gen = generate(tuned, render_prompt(spec), 0.0, cfg.max_new, {}, seed);
        tuned_baseline.push_back(evaluate_generation(spec, gen).passed);
    }
    SelectedFeature control_feat;
    control_feat.layer = info.control.first;
    control_feat.index = info.control.second;
    InterventionSpec steer = steer_spec(cfg, m, info.sel.correct_steering, alpha);
    InterventionSpec control = steer_spec(cfg, m, control_feat, alpha);
    SteeringExperiment exp =
        run_steering_experiment(tuned, an_problems, tuned_baseline, steer, control, seed, cfg.max_new);

    int tuned_passed = 0;
    for (bool b : tuned_baseline) tuned_passed += b;

    json j;
    j["frozen_threshold"] = true;
    j["frozen_alpha"] = true;
    j["threshold"] = finite_or_string(tau);
    j["alpha"] = alpha;
    j["base"] = {{"provenance", "base"},
                 {"detection", detection.at("incorrect_predicting").at("analysis")},
                 {"steering", steering.at("correct_steering").at("steering")}};
    j["tuned"] = {{"provenance", provenance_name(tuned.provenance)},
                  {"detection", detection_to_json(tuned_det)},
                  {"steering", report_to_json(exp.steering)},
                  {"baseline_pass_rate",
                   static_cast<double>(tuned_passed) / static_cast<double>(tuned_baseline.size())},
                  {"control", report_to_json(exp.control)}};
    write_file(out / "transfer.json", j.dump(2) + "\n");
    m.record("transfer.json", "transfer",
             {"lm_base.bin", "lm_tuned.bin", "selection.json", "detection.json", "steering.json"});
    m.save();
}

void cmd_report(const RunConfig& cfg, const fs::path& out) {
    (void)cfg;
    Manifest m = Manifest::load(out);
    json j;
    auto add = [&](const char* stage, const char* name) {
        if (m.has(name)) {
            try {
                j[stage] = load_json_artifact(m, name);
            } catch (const PipelineError&) {
                j[stage] = "corrupt";
            }
        } else {
            j[stage] = "stage missing";
        }
    };
    add("data", "splits.json");
    add("labels", "labels.json");
    add("selection", "selection.json");
    add("detection", "detection.json");
    add("steering", "steering.json");
    add("orthogonalization", "ortho.json");
    add("attention", "attention.json");
    add("transfer", "transfer.json");
    write_file(out / "report.json", j.dump(2) + "\n");
    m.record("report.json", "report", {});
    m.save();
}

void run_all(const RunConfig& cfg, const fs::path& out) {
    cmd_gen_data(cfg, out);
    cmd_train_lm(cfg, out);
    cmd_fine_tune(cfg, out);
    cmd_label(cfg, out);
    cmd_capture(cfg, out);
    cmd_train_sae(cfg, out);
    cmd_select(cfg, out);
    cmd_detect(cfg, out);
    cmd_steer(cfg, out);
    cmd_ortho(cfg, out);
    cmd_attention(cfg, out);
    cmd_transfer(cfg, out);
    cmd_report(cfg, out);
}

}  // namespace scalpel
