#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "scalpel/io.hpp"
#include "scalpel/pipeline.hpp"
#include "scalpel/rng.hpp"

using namespace scalpel;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("scalpel-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("RunConfig: defaults, JSON round-trip, and config errors") {
    RunConfig def;
    CHECK(def.seed == 1);
    CHECK(def.background_threshold == 0.02);

    TempDir tmp;
    write_file(tmp.path / "cfg.json", def.to_json());
    RunConfig loaded = RunConfig::load(tmp.path / "cfg.json");
    CHECK(loaded.to_json() == def.to_json());

    write_file(tmp.path / "bad.json", "{not json");
    try {
        RunConfig::load(tmp.path / "bad.json");
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        CHECK(e.exit_code == kExitConfig);
    }

    write_file(tmp.path / "bad2.json", "{\"n_problems\": 3}");
    try {
        RunConfig::load(tmp.path / "bad2.json");
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        CHECK(e.exit_code == kExitConfig);
    }
}

TEST_CASE("manifest: records hashes, detects tampering and absence") {
    TempDir tmp;
    write_file(tmp.path / "a.txt", "hello");
    Manifest m = Manifest::load(tmp.path);
    m.record("a.txt", "stage1", {});
    m.save();

    Manifest m2 = Manifest::load(tmp.path);
    CHECK(m2.has("a.txt"));
    CHECK(m2.require("a.txt") == tmp.path / "a.txt");

    try {
        m2.require("missing.txt");
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        CHECK(e.exit_code == kExitArtifact);
    }

    write_file(tmp.path / "a.txt", "tampered");
    try {
        m2.require("a.txt");
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        CHECK(e.exit_code == kExitArtifact);
    }
}

TEST_CASE("commands refuse to run without their inputs (exit code 3)") {
    TempDir tmp;
    RunConfig cfg;
    try {
        cmd_train_lm(cfg, tmp.path);  // no problems.json yet
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        CHECK(e.exit_code == kExitArtifact);
    }
}

TEST_CASE("gen-data artifacts are deterministic per seed") {
    TempDir a, b;
    RunConfig cfg;
    cfg.n_problems = 30;
    cmd_gen_data(cfg, a.path);
    cmd_gen_data(cfg, b.path);
    CHECK(read_file(a.path / "problems.json") == read_file(b.path / "problems.json"));
    CHECK(read_file(a.path / "splits.json") == read_file(b.path / "splits.json"));
    CHECK(sha256_file(a.path / "problems.json") == sha256_file(b.path / "problems.json"));

    RunConfig cfg2 = cfg;
    cfg2.seed = 2;
    TempDir c;
    cmd_gen_data(cfg2, c.path);
    CHECK(read_file(a.path / "problems.json") != read_file(c.path / "problems.json"));
}

TEST_CASE("problem sets: labeled and SAE-corpus ids are disjoint") {
    RunConfig cfg;
    cfg.n_problems = 20;
    cfg.sae_corpus_problems = 15;
    auto labeled = make_problem_set(cfg);
    auto corpus = make_sae_corpus_problems(cfg);
    CHECK(labeled.size() == 20);
    CHECK(corpus.size() == 15);
    CHECK(corpus.front().id == 20);
    CHECK(corpus.back().id == 34);
}

TEST_CASE("substream seeds are stable and name-separated") {
    CHECK(substream_seed(1, "a") == substream_seed(1, "a"));
    CHECK(substream_seed(1, "a") != substream_seed(1, "b"));
    CHECK(substream_seed(1, "a") != substream_seed(2, "a"));
}

TEST_CASE("sha256 matches known vectors") {
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    // 56-byte message exercises the two-block padding path.
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}
