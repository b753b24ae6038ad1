"""Answer-level metrics: containment accuracy, ANLS, entity F1, grounded F1."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import BBox, iou


def normalize(text: str) -> str:
    """Case-fold, trim, collapse internal whitespace."""
    return " ".join(text.casefold().split())


def accuracy_contains(prediction: str, gold: str) -> int:
    """1 if the normalized gold answer occurs inside the normalized prediction."""
    return int(normalize(gold) in normalize(prediction))


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(prediction: str, gold: str, tau: float = 0.5) -> float:
    """Normalized Levenshtein similarity, zeroed below ``tau``."""
    p, g = normalize(prediction), normalize(gold)
    if not p and not g:
        return 1.0
    s = 1.0 - levenshtein(p, g) / max(len(p), len(g))
    return s if s >= tau else 0.0


def _prf(matched: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def kie_f1(
    predicted: Sequence[tuple[str, str]], gold: Sequence[tuple[str, str]]
) -> tuple[float, float, float]:
    """Multiset exact match on (field, normalized value) pairs."""
    pc = Counter((f, normalize(v)) for f, v in predicted)
    gc = Counter((f, normalize(v)) for f, v in gold)
    matched = sum(min(c, gc[k]) for k, c in pc.items())
    return _prf(matched, len(predicted), len(gold))


def grounded_f1(
    predicted: Sequence[tuple[str, BBox | None]],
    gold: Sequence[tuple[str, BBox | None]],
    iou_min: float = 0.5,
) -> tuple[float, float, float]:
    """Value must match exactly and boxes must overlap with IoU >= ``iou_min``.

    Pairs are matched one-to-one, maximizing the number of matches; among
    maximum matchings the one with the largest IoU total is taken.
    """
    if not predicted or not gold:
        return _prf(0, len(predicted), len(gold))
    weight = np.zeros((len(predicted), len(gold)))
    for i, (pv, pb) in enumerate(predicted):
        for j, (gv, gb) in enumerate(gold):
            if pb is None or gb is None or normalize(pv) != normalize(gv):
                continue
            o = iou(pb, gb)
            if o >= iou_min:
                # 1 per match dominates any IoU tiebreak (sum of IoUs < 1 per row)
                weight[i, j] = len(predicted) + len(gold) + o
    rows, cols = linear_sum_assignment(weight, maximize=True)
    matched = int(np.count_nonzero(weight[rows, cols]))
    return _prf(matched, len(predicted), len(gold))
