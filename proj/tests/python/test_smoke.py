"""Smoke tests for the _core extension module and the CLI front end."""

import json
import os
import subprocess
import sys

import pytest

import _core


def test_metric_anchor():
    assert abs(_core.f1_from_pr(0.703, 0.985) - 0.821) <= 1e-3
    assert abs(_core.f1_from_pr(0.362, 0.828) - 0.504) <= 1e-3


def test_minilang_roundtrip():
    lexemes = _core.vocab_lexemes()
    assert "return" in lexemes and "x" in lexemes
    tok = lexemes.index
    expr = _core.parse_expression([tok("x"), tok("+"), tok("2")])
    assert _core.eval_expression(expr, 5) == 7
    with pytest.raises(ValueError):
        _core.parse_expression([tok("+"), tok("+")])


def test_problem_generation_deterministic():
    a = _core.generate_problem(1, 7, 1)
    b = _core.generate_problem(1, 7, 1)
    assert a.id == b.id == 7
    assert [t.input for t in a.tests] == [t.input for t in b.tests]
    prompt = _core.render_prompt(a)
    assert len(prompt.tokens) > 4
    assert prompt.description_span[0] == 1


def test_evaluate_generation():
    spec = _core.generate_problem(3, 1, 1)
    prompt = _core.render_prompt(spec)
    # The rendered target program must pass its own tests.
    result = _core.evaluate_generation(spec, spec.target_tokens)
    assert result.passed


def test_split_dataset_partition():
    sel, cal, ana = _core.split_dataset(list(range(100)), 123)
    assert len(sel) == 50 and len(cal) == 10 and len(ana) == 40
    assert sorted(sel + cal + ana) == list(range(100))


def test_statistics():
    assert _core.binomial_test_greater(0, 10, 0.5) == 1.0
    assert _core.binomial_test_greater(10, 10, 0.5) == pytest.approx(0.5**10)
    samples = [(0.9, True), (0.8, True), (0.2, False), (0.1, False)]
    assert _core.auroc(samples) == 1.0
    assert _core.token_similarity([1, 2, 3], [1, 2, 3]) == 100.0


def test_run_config_roundtrip(tmp_path):
    cfg = _core.RunConfig()
    assert cfg.seed == 1
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    loaded = _core.RunConfig.load(str(path))
    assert loaded.n_problems == cfg.n_problems


def test_cli_exit_codes(tmp_path):
    cli = os.environ.get("LATENT_SCALPEL_CLI")
    if not cli:
        pytest.skip("LATENT_SCALPEL_CLI not set")
    # Bad config -> exit 2.
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_problems": 1}))
    r = subprocess.run([cli, "gen-data", "--config", str(bad), "--out", str(tmp_path)],
                       capture_output=True)
    assert r.returncode == 2, r.stderr
    # Missing upstream artifact -> exit 3.
    r = subprocess.run([cli, "train-lm", "--out", str(tmp_path / "empty")], capture_output=True)
    assert r.returncode == 3, r.stderr
    # gen-data succeeds and is deterministic.
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        r = subprocess.run([cli, "gen-data", "--out", str(out)], capture_output=True)
        assert r.returncode == 0, r.stderr
    assert (out1 / "problems.json").read_bytes() == (out2 / "problems.json").read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
