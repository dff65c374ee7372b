#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "scalpel/attention.hpp"
#include "scalpel/detect.hpp"
#include "scalpel/features.hpp"
#include "scalpel/harness.hpp"
#include "scalpel/intervene.hpp"
#include "scalpel/minilang.hpp"
#include "scalpel/model.hpp"
#include "scalpel/pipeline.hpp"
#include "scalpel/sae.hpp"
#include "scalpel/vocab.hpp"

namespace py = pybind11;
using namespace scalpel;

PYBIND11_MODULE(_core, m) {
    m.doc() = "Sparse-autoencoder analysis of a toy code-generating transformer";

    // --- vocabulary / mini-language -------------------------------------
    m.def("vocab_lexemes", [] { return vocab().all_lexemes(); });
    m.def("detokenize", [](const std::vector<TokenId>& t) { return vocab().detokenize(t); });
    m.def("parse_expression", [](const std::vector<TokenId>& t) {
        auto r = minilang::parse(t);
        if (!r.expr) throw py::value_error("parse error: " + r.error);
        return minilang::to_tokens(*r.expr);
    });
    m.def("eval_expression", [](const std::vector<TokenId>& t, std::int64_t x) {
        auto r = minilang::parse(t);
        if (!r.expr) throw py::value_error("parse error: " + r.error);
        return minilang::eval(*r.expr, x);
    });

    // --- task harness ----------------------------------------------------
    py::class_<TestCase>(m, "TestCase")
        .def_readonly("input", &TestCase::input)
        .def_readonly("expected", &TestCase::expected);
    py::class_<ProblemSpec>(m, "ProblemSpec")
        .def_readonly("id", &ProblemSpec::id)
        .def_readonly("description", &ProblemSpec::description)
        .def_readonly("difficulty", &ProblemSpec::difficulty)
        .def_readonly("target_tokens", &ProblemSpec::target_tokens)
        .def_property_readonly("tests", [](const ProblemSpec& p) {
            return std::vector<TestCase>(p.tests.begin(), p.tests.end());
        });
    py::class_<PromptBundle>(m, "PromptBundle")
        .def_readonly("problem_id", &PromptBundle::problem_id)
        .def_readonly("tokens", &PromptBundle::tokens)
        .def_property_readonly("description_span",
                               [](const PromptBundle& p) {
                                   return std::pair(p.description.begin, p.description.end);
                               })
        .def_property_readonly(
            "tests_span", [](const PromptBundle& p) { return std::pair(p.tests.begin, p.tests.end); })
        .def_property_readonly("initiator_span", [](const PromptBundle& p) {
            return std::pair(p.initiator.begin, p.initiator.end);
        });
    py::class_<LabeledSample>(m, "LabeledSample")
        .def_readonly("problem_id", &LabeledSample::problem_id)
        .def_readonly("passed", &LabeledSample::passed)
        .def_readonly("generated_tokens", &LabeledSample::generated_tokens);
    m.def("generate_problem", &generate_problem, py::arg("seed"), py::arg("id"),
          py::arg("difficulty"));
    m.def("render_prompt", &render_prompt);
    m.def("evaluate_generation", &evaluate_generation);
    m.def("split_dataset", [](const std::vector<int>& ids, std::uint64_t seed) {
        SplitAssignment s = split_dataset(ids, seed);
        return py::make_tuple(s.selection_ids, s.calibration_ids, s.analysis_ids);
    });

    // --- model -----------------------------------------------------------
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("rng_seed", &ModelConfig::rng_seed);
    py::class_<Checkpoint>(m, "Checkpoint")
        .def_property_readonly("n_layers", [](const Checkpoint& c) { return c.cfg.n_layers; })
        .def_property_readonly("d_model", [](const Checkpoint& c) { return c.cfg.d_model; })
        .def_property_readonly("provenance",
                               [](const Checkpoint& c) { return provenance_name(c.provenance); });
    m.def("load_checkpoint", &load_checkpoint);
    m.def("save_checkpoint", &save_checkpoint);
    m.def(
        "generate",
        [](const Checkpoint& c, const PromptBundle& p, double temperature, int max_new,
           std::uint64_t seed) { return generate(c, p, temperature, max_new, {}, seed); },
        py::arg("ckpt"), py::arg("prompt"), py::arg("temperature") = 0.0, py::arg("max_new") = 24,
        py::arg("seed") = 0);
    m.def(
        "orthogonalize",
        [](const Checkpoint& c, const Eigen::VectorXd& d, const std::string& name) {
            return orthogonalize_checkpoint(c, d, name);
        },
        py::arg("ckpt"), py::arg("direction"), py::arg("direction_name") = "custom");

    // --- SAE ---------------------------------------------------------------
    py::class_<SAEParams>(m, "SAEParams")
        .def_readonly("layer", &SAEParams::layer)
        .def_readonly("w_enc", &SAEParams::w_enc)
        .def_readonly("b_enc", &SAEParams::b_enc)
        .def_readonly("theta", &SAEParams::theta)
        .def_readonly("w_dec", &SAEParams::w_dec)
        .def_readonly("b_dec", &SAEParams::b_dec);
    m.def("load_sae", &load_sae);
    m.def("sae_encode", &sae_encode);
    m.def("sae_decode", &sae_decode);

    // --- detection ----------------------------------------------------------
    m.def("f1_from_pr", &f1_from_pr);
    m.def("calibrate_threshold", [](const std::vector<std::pair<double, bool>>& xs) {
        std::vector<ScoredSample> s;
        for (auto& [score, pos] : xs) s.push_back({0, score, pos});
        return calibrate_threshold(s);
    });
    m.def("auroc", [](const std::vector<std::pair<double, bool>>& xs) {
        std::vector<ScoredSample> s;
        for (auto& [score, pos] : xs) s.push_back({0, score, pos});
        return auroc(s);
    });

    // --- interventions -------------------------------------------------------
    m.def("token_similarity", &token_similarity);
    m.def("binomial_test_greater", &binomial_test_greater);

    // --- pipeline --------------------------------------------------------------
    py::register_exception<PipelineError>(m, "PipelineError");
    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("load", &RunConfig::load)
        .def("to_json", &RunConfig::to_json)
        .def_readwrite("seed", &RunConfig::seed)
        .def_readwrite("n_problems", &RunConfig::n_problems);
    m.def("run_all", &run_all, py::arg("config"), py::arg("out_dir"));
    for (auto [name, fn] : std::initializer_list<
             std::pair<const char*, void (*)(const RunConfig&, const std::filesystem::path&)>>{
             {"cmd_gen_data", cmd_gen_data},
             {"cmd_train_lm", cmd_train_lm},
             {"cmd_fine_tune", cmd_fine_tune},
             {"cmd_label", cmd_label},
             {"cmd_capture", cmd_capture},
             {"cmd_train_sae", cmd_train_sae},
             {"cmd_select", cmd_select},
             {"cmd_detect", cmd_detect},
             {"cmd_steer", cmd_steer},
             {"cmd_ortho", cmd_ortho},
             {"cmd_attention", cmd_attention},
             {"cmd_transfer", cmd_transfer},
             {"cmd_report", cmd_report}})
        m.def(name, fn, py::arg("config"), py::arg("out_dir"));
}
