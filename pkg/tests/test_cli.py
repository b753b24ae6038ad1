import csv
import json

import pytest

from laytext.cli import main
from laytext.corpus import load_documents


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    path = d / "docs.jsonl"
    assert _run("synth", "--seed", 3, "--n-docs", 8, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps({
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "plora_rank": 4, "max_seq_len": 160},
        "train": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
        "vocab_size": 400,
    }))
    return path


def test_synth_empty(tmp_path):
    out = tmp_path / "e.jsonl"
    assert _run("synth", "--n-docs", 0, "--out", out) == 0
    assert out.read_text() == ""
    assert json.loads((tmp_path / "e.jsonl.manifest.json").read_text())["command"] == "synth"


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    _run("synth", "--seed", 5, "--n-docs", 10, "--out", a)
    _run("synth", "--seed", 5, "--n-docs", 10, "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_synth_bad_trap_fraction(tmp_path, capsys):
    assert _run("synth", "--n-docs", 3, "--trap-fraction", 1.5, "--out", tmp_path / "x.jsonl") == 2
    assert "trap_fraction" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    assert _run("synth", "--n-docs") == 1
    assert _run("frobnicate") == 1


def test_missing_corpus(tmp_path):
    assert _run("sft", "--corpus", tmp_path / "nope.jsonl", "--out-dir", tmp_path / "run") == 2


def test_pretrain_then_sft_then_eval(corpus, tiny_config, tmp_path):
    pre = tmp_path / "pre"
    assert _run("pretrain", "--corpus", corpus, "--config", tiny_config, "--out-dir", pre) == 0
    names = {p.name for p in pre.iterdir()}
    assert {"manifest.json", "config.json", "loss.csv", "final.npz", "vocab.json"} <= names
    run = tmp_path / "sft"
    assert _run("sft", "--corpus", corpus, "--config", tiny_config, "--init", pre / "final.npz", "--out-dir", run) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["train"]["shuffle_ratio"] == 0.2
    assert manifest["config"]["train"]["stage"] == "sft"
    lens = {}
    for scheme in ("coord_tokens", "plain"):
        out = tmp_path / f"eval_{scheme}"
        assert _run("eval", "--checkpoint", run / "final.npz", "--corpus", corpus, "--scheme", scheme, "--out", out) == 0
        lens[scheme] = json.loads((out / "report.json").read_text())["aggregates"]["mean_prompt_len"]
    assert lens["coord_tokens"] >= lens["plain"]


def test_flags_override_config(corpus, tiny_config, tmp_path):
    run = tmp_path / "r"
    assert _run("sft", "--corpus", corpus, "--config", tiny_config, "--out-dir", run, "--shuffle-ratio", 0.5, "--lr", 0.002) == 0
    train = json.loads((run / "config.json").read_text())["train"]
    assert train["shuffle_ratio"] == 0.5 and train["lr"] == 0.002 and train["epochs"] == 1


def test_bad_config_key(corpus, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"width": 3}}))
    assert _run("sft", "--corpus", corpus, "--config", cfg, "--out-dir", tmp_path / "r") == 2


def test_seqlen(corpus, tiny_config, tmp_path):
    pre = tmp_path / "pre"
    _run("pretrain", "--corpus", corpus, "--config", tiny_config, "--out-dir", pre)
    out = tmp_path / "len.csv"
    assert _run("seqlen", "--corpus", corpus, "--vocab", pre / "vocab.json", "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(load_documents(corpus))
    for r in rows:
        assert int(r["interleaved"]) == int(r["plain"]) + int(r["n_words"])
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert _run("seqlen", "--corpus", empty, "--vocab", pre / "vocab.json", "--out", tmp_path / "e.csv") == 0
    assert (tmp_path / "e.csv").read_text().strip() == "doc_id,n_words,plain,interleaved,coord_tokens"


def test_sweep(corpus, tiny_config, tmp_path):
    out = tmp_path / "sweep.csv"
    assert _run("sweep", "--corpus", corpus, "--config", tiny_config, "--ratios", "1.0,0.5,0.2,0.0", "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["train_shuffle_ratio"]) for r in rows] == [1.0, 0.5, 0.2, 0.0]


def test_bad_ratios(corpus, tmp_path):
    assert _run("sweep", "--corpus", corpus, "--ratios", "a,b", "--out", tmp_path / "s.csv") == 2


def test_threads_env(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("LAYTEXT_THREADS", "zero")
    assert _run("synth", "--n-docs", 1, "--out", tmp_path / "t.jsonl") == 2
    monkeypatch.setenv("LAYTEXT_THREADS", "1")
    assert _run("synth", "--n-docs", 1, "--out", tmp_path / "t.jsonl") == 0
