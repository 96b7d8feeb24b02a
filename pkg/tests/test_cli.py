from __future__ import annotations

import json
import subprocess
import sys


from latentlang.cli import config_hash, main
from latentlang.density import load
from latentlang.langspec import LanguageSpec


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_gen(tmp_path, capsys):
    out = tmp_path / "g"
    rc = main(["gen", "--eta", "0", "--messages", "1000", "--seed", "42", "--sidecar", "--measure-epsilon",
               "--out-dir", str(out)])
    assert rc == 0
    lines = (out / "corpus.txt").read_text().splitlines()
    assert len(lines) == 1000 and all(len(line) == 20 for line in lines)
    thetas = [int(t) for t in (out / "corpus.intentions").read_text().split()]
    for line, th in zip(lines, thetas):
        assert set(line) <= set("abcdefghijklmnopqr"[3 * th:3 * th + 3])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["results"]["max_epsilon"] == 0.0
    assert summary["config_hash"] == config_hash(summary["config"])
    assert "out_dir" not in summary["config"] and summary["seed"] == 42
    assert LanguageSpec.load(out / "spec.json").fingerprint == summary["results"]["spec_fingerprint"]
    assert "max epsilon: 0" in capsys.readouterr().out


def test_gen_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--eta", "0.05", "--messages", "200", "--seed", "3", "--sidecar",
                     "--out-dir", str(tmp_path / d)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("LATENTLANG_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gen", "--messages", "5"]) == 0
    assert (tmp_path / "env" / "corpus.txt").is_file()


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"messages": 7, "eta": 0.1}))
    assert main(["--config", str(cfg), "gen", "--out-dir", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "corpus.txt").read_text().splitlines()) == 7
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["--config", str(cfg), "gen", "--out-dir", str(tmp_path / "o")]) == 2


def test_train_and_eval(tmp_path, capsys):
    d = tmp_path / "t"
    main(["gen", "--messages", "2000", "--out-dir", str(d)])
    rc = main(["train", "--corpus", str(d / "corpus.txt"), "--spec", str(d / "spec.json"), "--out-dir", str(d)])
    assert rc == 0
    res = json.loads((d / "summary.json").read_text())["results"]
    assert res["excess"] < 0.1 and res["heldout_symbols"] == 200 * 21
    model = load(d / "model.json")
    assert model.k == 2 and model.total_training_symbols == 1800 * 21
    rc = main(["eval", "--model", str(d / "model.json"), "--corpus", str(d / "corpus.txt"),
               "--spec", str(d / "spec.json"), "--out-dir", str(d)])
    assert rc == 0
    ev = json.loads((d / "eval_summary.json").read_text())["results"]
    assert 0 <= ev["mean_tv_gap"] < 0.2
    assert "mean TV gap" in capsys.readouterr().out


def test_train_errors(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "missing.txt"), "--out-dir", str(tmp_path)]) == 2
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["train", "--corpus", str(empty), "--out-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("abcdefghijklmnopqrab\nabcdefghijklmnopqr1b\n")
    assert main(["train", "--corpus", str(bad), "--out-dir", str(tmp_path)]) == 3
    assert "line 2" in capsys.readouterr().err


def test_eval_model_errors(tmp_path):
    main(["gen", "--messages", "20", "--out-dir", str(tmp_path)])
    (tmp_path / "m.json").write_text('{"format": "nope"}')
    assert main(["eval", "--model", str(tmp_path / "m.json"), "--corpus", str(tmp_path / "corpus.txt"),
                 "--out-dir", str(tmp_path)]) == 3


def test_verify_prop1(tmp_path, capsys):
    rc = main(["verify", "--prop", "1", "--eta", "0.05", "--trials", "1000", "--out-dir", str(tmp_path)])
    assert rc == 0
    summary = json.loads((tmp_path / "verify_summary.json").read_text())
    assert summary["results"]["prop1"]["violations"] == 0
    assert len((tmp_path / "verify_prop1.csv").read_text().splitlines()) == 1001
    assert "prop1: PASS" in capsys.readouterr().out


def test_verify_prop3_equality(tmp_path, capsys):
    rc = main(["verify", "--prop", "3", "--eta", "0", "--trials", "50", "--m-max", "3", "--out-dir", str(tmp_path)])
    assert rc == 0
    res = json.loads((tmp_path / "verify_summary.json").read_text())["results"]["prop3"]
    assert res["max_symbol_deviation"] < 1e-10
    assert "max per-symbol deviation" in capsys.readouterr().out


def test_verify_unknown(tmp_path, capsys):
    assert main(["verify", "--prop", "7", "--out-dir", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_verify_trained_needs_model(tmp_path):
    assert main(["verify", "--prop", "2", "--backend", "trained", "--trials", "5", "--out-dir", str(tmp_path)]) == 2


def test_verify_all_small(tmp_path):
    rc = main(["verify", "--prop", "all", "--eta", "0.05", "--trials", "100", "--m-max", "3",
               "--exhaustive-prompts", "2", "--out-dir", str(tmp_path)])
    assert rc == 0
    res = json.loads((tmp_path / "verify_summary.json").read_text())["results"]
    assert set(res) == {"sparsity", "prop1", "prop2", "prop3", "mixture", "cot"}
    assert all(r["violations"] == 0 for r in res.values())


def test_experiment_small_deterministic(tmp_path):
    args = ["experiment", "--which", "convergence", "--sizes", "2000", "20000", "--ks", "1", "2"]
    for d in ("a", "b"):
        assert main(args + ["--out-dir", str(tmp_path / d)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    rows = (tmp_path / "a" / "convergence.csv").read_text().splitlines()
    assert rows[0] == "k,train_symbols,train_messages,cross_entropy,oracle_entropy,excess,mean_tv_gap"
    assert len(rows) == 5


def test_bad_config_value(tmp_path):
    assert main(["gen", "--eta", "1.5", "--out-dir", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "latentlang", "gen", "--messages", "3", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "messages: 3" in proc.stdout
    assert len((tmp_path / "corpus.txt").read_text()) == 63
