"""OCR document model, JSONL I/O, reading order, and synthetic KV documents.

Boxes are stored normalized to the page extent. The synthetic generator emits
receipt-like pages in two layouts:

* ``kv``: one ``Field value`` pair per line, the value right of its label.
* ``table``: a header row of field names above a row of values. Reading
  order emits every header before any value, so a field and its value are
  far apart in the token stream while sharing a column on the page.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ParseError, ValidationError

_QUESTION_RE = re.compile(r"What is the (.+) value\?")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValidationError(f"box {vals} violates 0 <= min <= max <= 1")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def y_center(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def x_center(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def union(self, other: BBox) -> BBox:
        return BBox(min(self.x1, other.x1), min(self.y1, other.y1), max(self.x2, other.x2), max(self.y2, other.y2))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw < 0 or ih < 0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        # zero-area boxes: identical degenerate boxes count as a full overlap
        return 1.0 if a == b else 0.0
    return inter / union


def union_all(boxes: Sequence[BBox]) -> BBox:
    out = boxes[0]
    for b in boxes[1:]:
        out = out.union(b)
    return out


@dataclass(frozen=True)
class OcrWord:
    text: str
    box: BBox

    def __post_init__(self):
        if not self.text:
            raise ValidationError("OCR word text must be non-empty")
        if "\n" in self.text or "\r" in self.text:
            raise ValidationError(f"OCR word {self.text!r} contains a newline")


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str
    answer_boxes: tuple[BBox, ...] | None = None

    def __post_init__(self):
        if not self.answer:
            raise ValidationError("answer must be a non-empty string")

    @property
    def field_name(self) -> str:
        """The field a synthetic KV question asks about."""
        m = _QUESTION_RE.fullmatch(self.question)
        return m.group(1) if m else self.question

    def answer_box(self) -> BBox | None:
        return union_all(self.answer_boxes) if self.answer_boxes else None


@dataclass
class Document:
    id: str
    words: list[OcrWord]
    qa: list[QaPair] = field(default_factory=list)
    page_w: float = 1000.0
    page_h: float = 1000.0
    layout: str = ""

    def __post_init__(self):
        if not (self.page_w > 0 and self.page_h > 0):
            raise ValidationError(f"document {self.id}: page size must be positive")

    def replace_words(self, words: list[OcrWord]) -> Document:
        return Document(self.id, list(words), list(self.qa), self.page_w, self.page_h, self.layout)


def normalize_box(abs_box: Sequence[float], page_w: float, page_h: float) -> BBox:
    """Pixel box to page-normalized box, with min/max reordered if needed."""
    if not all(math.isfinite(float(v)) for v in (*abs_box, page_w, page_h)):
        raise NumericError(f"non-finite box or page size: {abs_box}, {page_w}x{page_h}")
    if page_w <= 0 or page_h <= 0:
        raise ValidationError("page_w and page_h must be positive")
    x1, y1, x2, y2 = (float(v) for v in abs_box)
    xa, xb = sorted((x1 / page_w, x2 / page_w))
    ya, yb = sorted((y1 / page_h, y2 / page_h))
    return BBox(xa, ya, xb, yb)


def reading_order(words: Sequence[OcrWord], line_tolerance: float = 0.01) -> list[OcrWord]:
    """Top-to-bottom lines, left-to-right within a line.

    Words whose vertical centers lie within ``line_tolerance`` of the first
    word of the current line join that line.
    """
    by_y = sorted(words, key=lambda w: w.box.y_center)
    lines: list[list[OcrWord]] = []
    anchor = None
    for w in by_y:
        if anchor is None or w.box.y_center - anchor > line_tolerance:
            lines.append([])
            anchor = w.box.y_center
        lines[-1].append(w)
    out: list[OcrWord] = []
    for line in lines:
        out.extend(sorted(line, key=lambda w: w.box.x1))
    return out


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _box_from_json(raw, where: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{where}: box must be a list of 4 numbers, got {raw!r}")
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: non-numeric box {raw!r}") from exc
    return BBox(*vals)


def document_from_dict(obj: dict) -> Document:
    doc_id = str(obj.get("id", "?"))
    try:
        words = []
        for i, w in enumerate(obj["words"]):
            words.append(OcrWord(str(w["text"]), _box_from_json(w["box"], f"word {i}")))
        qa = []
        for j, q in enumerate(obj.get("qa", [])):
            boxes = q.get("boxes")
            qb = tuple(_box_from_json(b, f"qa {j}") for b in boxes) if boxes is not None else None
            qa.append(QaPair(str(q["q"]), str(q["a"]), qb))
        return Document(
            doc_id,
            words,
            qa,
            float(obj.get("page_w", 1000.0)),
            float(obj.get("page_h", 1000.0)),
            str(obj.get("layout", "")),
        )
    except ValidationError as exc:
        raise ValidationError(f"document {doc_id}: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"document {doc_id}: missing or malformed field {exc}") from exc


def document_to_dict(doc: Document) -> dict:
    out = {
        "id": doc.id,
        "page_w": doc.page_w,
        "page_h": doc.page_h,
        "words": [{"text": w.text, "box": w.box.as_list()} for w in doc.words],
        "qa": [],
    }
    for q in doc.qa:
        item = {"q": q.question, "a": q.answer}
        if q.answer_boxes is not None:
            item["boxes"] = [b.as_list() for b in q.answer_boxes]
        out["qa"].append(item)
    if doc.layout:
        out["layout"] = doc.layout
    return out


def load_documents(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            docs.append(document_from_dict(obj))
    return docs


def dumps_documents(docs: Iterable[Document]) -> str:
    return "".join(json.dumps(document_to_dict(d), ensure_ascii=False) + "\n" for d in docs)


def save_documents(docs: Iterable[Document], path) -> None:
    Path(path).write_text(dumps_documents(docs), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

FIELD_LEXICON = (
    "Total", "Subtotal", "GST", "Tax", "Change", "Cash", "Rounding", "Discount",
    "Service", "Tip", "Deposit", "Balance", "Net", "Fee", "Due", "Paid",
)
KV_ONLY_FIELDS = ("Date", "Invoice", "Table", "Cashier")
STORE_WORDS = ("MART", "CAFE", "STORE", "DELI", "MARKET", "KITCHEN", "BAKERY", "SHOP")
STORE_NAMES = ("ACME", "SUNRISE", "GOLDEN", "LUCKY", "METRO", "ROYAL", "UNION", "PEARL")
MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for ``synth_kv_documents``."""

    trap_fraction: float = 0.5
    min_fields: int = 3
    max_fields: int = 5
    page_w: float = 1000.0
    page_h: float = 1400.0
    header_lines: int = 1
    date_fraction: float = 0.3
    value_pool: int = 120  # distinct amounts to draw from; 0 means unrestricted

    def __post_init__(self):
        if not 0.0 <= self.trap_fraction <= 1.0:
            raise ValidationError(f"trap_fraction must be in [0, 1], got {self.trap_fraction}")
        if self.value_pool < 0 or 0 < self.value_pool < self.max_fields:
            raise ValidationError("value_pool must be 0 or at least max_fields")
        if not 1 <= self.min_fields <= self.max_fields <= len(FIELD_LEXICON):
            raise ValidationError("need 1 <= min_fields <= max_fields <= lexicon size")


def question_for(field_name: str) -> str:
    # the field name stands alone between spaces so it tokenizes like the page label
    return f"What is the {field_name} value?"


def _amount(rng: np.random.Generator) -> str:
    return f"{int(rng.integers(0, 100))}.{int(rng.integers(0, 100)):02d}"


@lru_cache(maxsize=8)
def amount_pool(n: int) -> tuple[str, ...]:
    """A fixed set of ``n`` amounts, identical for every corpus seed."""
    rng = np.random.default_rng(20240607)
    pool: list[str] = []
    while len(pool) < n:
        a = _amount(rng)
        if a not in pool:
            pool.append(a)
    return tuple(pool)


def _distinct_amounts(rng: np.random.Generator, k: int, pool_size: int = 0) -> list[str]:
    pool = amount_pool(pool_size) if pool_size else None
    out: list[str] = []
    while len(out) < k:
        a = _amount(rng) if pool is None else pool[int(rng.integers(len(pool)))]
        # no value may contain another, so containment scoring stays unambiguous
        if all(a not in b and b not in a for b in out):
            out.append(a)
    return out


class _Page:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.words: list[OcrWord] = []

    def put(self, text: str, x: float, y: float, char_w: float = 11.0, h: float = 24.0) -> BBox:
        w = char_w * len(text)
        box = normalize_box((x, y, x + w, y + h), self.spec.page_w, self.spec.page_h)
        box = BBox(*(round(v, 4) for v in box.as_list()))
        self.words.append(OcrWord(text, box))
        return box


def _header(page: _Page, rng: np.random.Generator) -> float:
    y = 40.0 + float(rng.uniform(0, 20))
    for _ in range(page.spec.header_lines):
        x = 60.0 + float(rng.uniform(0, 200))
        for text in (str(rng.choice(STORE_NAMES)), str(rng.choice(STORE_WORDS))):
            page.put(text, x, y)
            x += 11.0 * len(text) + 14.0
        y += 50.0
    return y + 30.0


def _kv_document(doc_id: str, rng: np.random.Generator, spec: SynthSpec) -> Document:
    page = _Page(spec)
    y = _header(page, rng)
    k = int(rng.integers(spec.min_fields, spec.max_fields + 1))
    fields = [str(f) for f in rng.choice(FIELD_LEXICON, size=k, replace=False)]
    values: list[list[str]] = [[a] for a in _distinct_amounts(rng, k, spec.value_pool)]
    if rng.random() < spec.date_fraction:
        fields.insert(0, "Date")
        values.insert(0, [str(rng.choice(MONTHS)), str(int(rng.integers(1, 29)))])
    label_x = 60.0 + float(rng.uniform(0, 40))
    value_x = 560.0 + float(rng.uniform(0, 120))
    qa = []
    for name, val in zip(fields, values):
        page.put(name, label_x, y)
        x = value_x
        boxes = []
        for part in val:
            boxes.append(page.put(part, x, y))
            x += 11.0 * len(part) + 12.0
        qa.append(QaPair(question_for(name), " ".join(val), tuple(boxes)))
        y += float(rng.uniform(42, 60))
    words = reading_order(page.words)
    return Document(doc_id, words, qa, spec.page_w, spec.page_h, "kv")


def _table_document(doc_id: str, rng: np.random.Generator, spec: SynthSpec) -> Document:
    page = _Page(spec)
    y = _header(page, rng)
    k = int(rng.integers(spec.min_fields, spec.max_fields + 1))
    fields = [str(f) for f in rng.choice(FIELD_LEXICON, size=k, replace=False)]
    values = _distinct_amounts(rng, k, spec.value_pool)
    left, right = 50.0, spec.page_w - 50.0
    col_w = (right - left) / k
    row_gap = float(rng.uniform(45, 70))
    qa = []
    for j, (name, val) in enumerate(zip(fields, values)):
        cx = left + col_w * (j + 0.5) + float(rng.uniform(-0.08, 0.08)) * col_w
        hw = 11.0 * len(name)
        vw = 11.0 * len(val)
        page.put(name, cx - hw / 2, y)
        vbox = page.put(val, cx - vw / 2, y + row_gap)
        qa.append(QaPair(question_for(name), val, (vbox,)))
    words = reading_order(page.words)
    return Document(doc_id, words, qa, spec.page_w, spec.page_h, "table")


def synth_kv_documents(seed: int, n_docs: int, spec: SynthSpec | None = None) -> list[Document]:
    """Deterministic synthetic receipts with key-value QA pairs."""
    spec = spec or SynthSpec()
    if n_docs < 0:
        raise ValidationError("n_docs must be >= 0")
    docs = []
    for i in range(n_docs):
        rng = np.random.default_rng([seed, i])
        doc_id = f"synth-{seed}-{i:06d}"
        # exact quota: the first m docs contain round(m * trap_fraction) tables
        if math.floor((i + 1) * spec.trap_fraction + 0.5) > math.floor(i * spec.trap_fraction + 0.5):
            docs.append(_table_document(doc_id, rng, spec))
        else:
            docs.append(_kv_document(doc_id, rng, spec))
    return docs
