import csv
import json

import numpy as np
import pytest

from laytext.corpus import synth_kv_documents
from laytext.errors import ContractError
from laytext.evaluation import evaluate, perf_vs_length_csv, write_perf_vs_length, write_report
from laytext.model import ModelConfig, init_params
from laytext.sequencer import grounded_answer
from laytext.tokenizer import corpus_texts, train_bpe


@pytest.fixture(scope="module")
def setup():
    docs = synth_kv_documents(0, 8)
    return docs, train_bpe(corpus_texts(docs), 500)


def _oracle(prompt, doc, qa):
    return qa.answer


def test_oracle_predictor_scores_perfectly(setup):
    docs, v = setup
    rep = evaluate(None, v, docs, predictor=_oracle)
    assert rep.aggregates["accuracy"] == 1.0 and rep.aggregates["anls"] == 1.0 and rep.aggregates["f1"] == 1.0


def test_empty_predictions(setup):
    docs, v = setup
    rep = evaluate(None, v, docs, predictor=lambda *a: "")
    assert rep.aggregates["accuracy"] == 0.0 and rep.aggregates["f1"] == 0.0


def test_grounded_oracle(setup):
    docs, v = setup
    rep = evaluate(None, v, docs, grounded=True, predictor=lambda p, d, qa: grounded_answer(qa))
    assert rep.aggregates["grounded_f1"] == 1.0
    assert rep.aggregates["accuracy"] == 1.0


def test_prompt_length_by_scheme(setup):
    docs, v = setup
    lens = {s: evaluate(None, v, docs, scheme=s, predictor=_oracle).mean_prompt_len for s in ("plain", "interleaved", "coord_tokens")}
    assert lens["coord_tokens"] > lens["interleaved"] > lens["plain"]


def test_interleaved_needs_layout_model(setup):
    docs, v = setup
    cfg = ModelConfig(vocab_size=v.size, d_model=32, n_layers=1, n_heads=2, plora_rank=4, layout=False)
    with pytest.raises(ContractError):
        evaluate(init_params(cfg), v, docs, scheme="interleaved")


def test_model_decoding_runs(setup):
    docs, v = setup
    cfg = ModelConfig(vocab_size=v.size, d_model=32, n_layers=1, n_heads=2, plora_rank=4, max_seq_len=256)
    rep = evaluate(init_params(cfg, 0), v, docs[:2], max_len=256)
    assert len(rep.records) == sum(len(d.qa) for d in docs[:2])
    assert 0.0 <= rep.aggregates["anls"] <= 1.0


def test_reports_written(setup, tmp_path):
    docs, v = setup
    rep = evaluate(None, v, docs, predictor=_oracle)
    write_report(rep, tmp_path)
    obj = json.loads((tmp_path / "report.json").read_text())
    assert obj["aggregates"]["accuracy"] == 1.0
    lines = (tmp_path / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == len(rep.records)
    rows = perf_vs_length_csv([rep])
    write_perf_vs_length(rows, tmp_path / "perf.csv")
    with open(tmp_path / "perf.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_perf_vs_length_needs_reports():
    with pytest.raises(ContractError):
        perf_vs_length_csv([])


def test_shuffled_eval_deterministic(setup):
    docs, v = setup
    seen = []
    for _ in range(2):
        rep = evaluate(None, v, docs, shuffled=True, seed=4, predictor=lambda p, d, qa: str(p.ids[:20]))
        seen.append([r.prediction for r in rep.records])
    assert seen[0] == seen[1]
