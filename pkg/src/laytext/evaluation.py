"""Scheme-aware evaluation with greedy decoding, plus report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Document, QaPair
from .errors import ContractError
from .metrics import accuracy_contains, anls, grounded_f1, kie_f1
from .model import ModelParams, generate, parse_grounded_output
from .sequencer import SftOptions, build_sample
from .tokenizer import SCHEMES, Vocab

METRICS = ("accuracy", "anls", "f1")


@dataclass
class EvalRecord:
    doc_id: str
    question: str
    gold: str
    prediction: str
    prompt_len: int
    scores: dict[str, float]
    predicted_boxes: list = field(default_factory=list)


@dataclass
class EvalReport:
    scheme: str
    records: list[EvalRecord]
    aggregates: dict[str, float]

    @property
    def mean_prompt_len(self) -> float:
        return float(np.mean([r.prompt_len for r in self.records])) if self.records else 0.0

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "aggregates": self.aggregates, "records": [asdict(r) for r in self.records]}


Predictor = Callable[[object, Document, QaPair], str]


def aggregate(records: Sequence[EvalRecord], grounded: bool, gold_qa: Sequence[QaPair]) -> dict[str, float]:
    """Means for per-answer metrics, set-level computation for the F-scores."""
    out: dict[str, float] = {}
    n = len(records)
    out["accuracy"] = float(np.mean([r.scores["accuracy"] for r in records])) if n else 0.0
    out["anls"] = float(np.mean([r.scores["anls"] for r in records])) if n else 0.0
    # entity keys carry the record index so answers never match across questions
    pred = [(f"{i}:{r.question}", r.prediction) for i, r in enumerate(records) if r.prediction.strip()]
    gold = [(f"{i}:{r.question}", r.gold) for i, r in enumerate(records)]
    out["precision"], out["recall"], out["f1"] = kie_f1(pred, gold)
    if grounded:
        gp, gg = [], []
        for i, (r, qa) in enumerate(zip(records, gold_qa)):
            gp.extend((f"{i}\x00{v}", b) for v, b in r.predicted_boxes)
            gg.append((f"{i}\x00{qa.answer}", qa.answer_box()))
        out["grounded_precision"], out["grounded_recall"], out["grounded_f1"] = grounded_f1(gp, gg)
    out["mean_prompt_len"] = float(np.mean([r.prompt_len for r in records])) if n else 0.0
    return out


def evaluate(
    params: ModelParams | None,
    vocab: Vocab,
    docs: Sequence[Document],
    scheme: str = "interleaved",
    grounded: bool = False,
    shuffled: bool = False,
    seed: int = 0,
    max_len: int = 512,
    predictor: Predictor | None = None,
) -> EvalReport:
    """Greedy-decode an answer for every QA pair and score it.

    ``predictor(prompt_sample, doc, qa)`` replaces model decoding when given
    (used for metric sanity checks). With ``shuffled`` each document's OCR
    words are permuted with a per-example seed before prompting.
    """
    if scheme not in SCHEMES:
        raise ContractError(f"unknown scheme {scheme!r}")
    if predictor is None:
        if params is None:
            raise ContractError("evaluate needs params or a predictor")
        if scheme == "interleaved" and not params.config.layout:
            raise ContractError("interleaved scheme needs a model with a spatial layout projector")
        if params.config.vocab_size < vocab.size:
            raise ContractError("model vocabulary is smaller than the tokenizer's")
        max_len = min(max_len, params.config.max_seq_len)
    records = []
    gold_qa = []
    idx = 0
    for doc in docs:
        for qa in doc.qa:
            opts = SftOptions(shuffled=shuffled, grounded_output=grounded, seed=seed * 1_000_003 + idx)
            idx += 1
            prompt = build_sample(scheme, doc, qa, vocab, opts, max_len).prompt()
            if predictor is not None:
                text = predictor(prompt, doc, qa)
            else:
                room = max_len - len(prompt)
                text = vocab.decode(generate(params, prompt, max_new_tokens=max(1, min(64, room))))
            boxes = []
            answer_text = text
            if grounded:
                items, _ = parse_grounded_output(text)
                boxes = [(s, b) for s, b in items if b is not None]
                answer_text = " ".join(s for s, _ in items) if items else text
            scores = {
                "accuracy": float(accuracy_contains(answer_text, qa.answer)),
                "anls": anls(answer_text, qa.answer),
            }
            records.append(EvalRecord(doc.id, qa.question, qa.answer, text, len(prompt), scores, boxes))
            gold_qa.append(qa)
    return EvalReport(scheme, records, aggregate(records, grounded, gold_qa))


def write_report(report: EvalReport, out_dir) -> None:
    """``report.json`` (full), ``aggregates.csv``, and ``predictions.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, default=list), encoding="utf-8")
    with open(out / "aggregates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "metric", "value"])
        for k, v in report.aggregates.items():
            w.writerow([report.scheme, k, repr(v)])
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for r in report.records:
            row = {"id": r.doc_id, "q": r.question, "gold": r.gold, "pred": r.prediction, "len": r.prompt_len, "scores": r.scores}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def perf_vs_length_csv(reports: Sequence[EvalReport], metrics: Sequence[str] = METRICS) -> list[tuple]:
    """Rows of (scheme, mean prompt length, metric, value) for plotting."""
    if not reports:
        raise ContractError("need at least one report")
    rows = []
    for rep in reports:
        for m in metrics:
            rows.append((rep.scheme, rep.aggregates["mean_prompt_len"], m, rep.aggregates[m]))
    return rows


def write_perf_vs_length(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "mean_length", "metric", "value"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), r[2], repr(r[3])])
