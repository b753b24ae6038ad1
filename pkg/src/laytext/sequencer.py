"""Model-ready sequences for pre-training, SFT, and the text baselines.

Interleaved context is ``[BOX, word tokens...]`` per word: the box slot holds
the placeholder id and its coordinates travel in ``box_values``. Text-only
schemes join per-word tokens with a separator (``plain``) or serialize
integer-percent coordinates as literal text (``coord_tokens``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import BBox, Document, OcrWord, QaPair
from .errors import ContractError
from .tokenizer import PROMPT_QUESTION, SEPARATOR, Vocab, format_box

_BOX_RE = re.compile(r"\[(\d+),(\d+),(\d+),(\d+)\]")


@dataclass
class InterleavedSample:
    ids: list[int]
    box_values: list[tuple[int, BBox]]
    modality_mask: list[int]
    loss_mask: list[int]
    answer_start: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def positions(self) -> list[int]:
        return list(range(len(self.ids)))

    def prompt(self) -> InterleavedSample:
        """Everything before the response, with the loss mask cleared."""
        if self.answer_start is None:
            raise ContractError("sample has no response segment")
        n = self.answer_start
        return InterleavedSample(
            self.ids[:n],
            [(p, b) for p, b in self.box_values if p < n],
            self.modality_mask[:n],
            [0] * n,
            None,
            dict(self.meta),
        )

    def response_ids(self) -> list[int]:
        return [] if self.answer_start is None else self.ids[self.answer_start :]

    def check(self, vocab: Vocab, max_len: int | None = None) -> None:
        """Assert the structural invariants; raises ``ContractError``."""
        n = len(self.ids)
        if not (len(self.modality_mask) == len(self.loss_mask) == n):
            raise ContractError("mask lengths differ from sequence length")
        slots = {p for p, _ in self.box_values}
        for i, t in enumerate(self.ids):
            if (self.modality_mask[i] == 1) != (t == vocab.BOX) or (t == vocab.BOX) != (i in slots):
                raise ContractError(f"box slot bookkeeping broken at position {i}")
            if self.loss_mask[i] and self.modality_mask[i]:
                raise ContractError(f"loss placed on a box token at position {i}")
        if max_len is not None and n > max_len:
            raise ContractError(f"sample length {n} exceeds max_len {max_len}")


@dataclass(frozen=True)
class SftOptions:
    shuffled: bool = False
    grounded_output: bool = False
    seed: int = 0


def shuffle_words(doc: Document, rng: np.random.Generator) -> Document:
    """Uniform random permutation of the OCR words; each keeps its own box."""
    perm = rng.permutation(len(doc.words))
    return doc.replace_words([doc.words[i] for i in perm])


# ---------------------------------------------------------------------------
# context segments
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self):
        self.ids: list[int] = []
        self.boxes: list[tuple[int, BBox]] = []
        self.modality: list[int] = []
        self.loss: list[int] = []

    def text(self, ids, loss: int = 0) -> None:
        self.ids.extend(ids)
        self.modality.extend([0] * len(ids))
        self.loss.extend([loss] * len(ids))

    def box(self, vocab: Vocab, box: BBox) -> None:
        self.boxes.append((len(self.ids), box))
        self.ids.append(vocab.BOX)
        self.modality.append(1)
        self.loss.append(0)

    def sample(self, answer_start=None, meta=None) -> InterleavedSample:
        return InterleavedSample(self.ids, self.boxes, self.modality, self.loss, answer_start, meta or {})


def _interleaved_groups(words, vocab):
    return [vocab.encode_word(w.text) for w in words]


def _fit_words(costs: list[int], budget: int) -> int:
    """How many leading words fit into ``budget`` tokens."""
    used = 0
    for n, c in enumerate(costs):
        if used + c > budget:
            return n
        used += c
    return len(costs)


def build_pretrain_sample(doc: Document, vocab: Vocab, max_len: int) -> InterleavedSample:
    """``[BOS, (BOX, text...) per word]`` with loss on text tokens only."""
    if not doc.words:
        raise ContractError(f"document {doc.id} has no words")
    groups = _interleaved_groups(doc.words, vocab)
    keep = _fit_words([1 + len(g) for g in groups], max_len - 1)
    if keep == 0:
        raise ContractError(f"document {doc.id}: first word does not fit in max_len={max_len}")
    b = _Builder()
    b.text([vocab.BOS])
    for w, g in zip(doc.words[:keep], groups[:keep]):
        b.box(vocab, w.box)
        b.text(g, loss=1)
    return b.sample(meta={"doc": doc.id, "words": keep})


def grounded_answer(qa: QaPair) -> str:
    box = qa.answer_box()
    if box is None:
        raise ContractError("grounded output requested but the QA pair has no answer boxes")
    return qa.answer + format_box(box)


def _qa_tail(qa: QaPair, vocab: Vocab, opts: SftOptions) -> tuple[list[int], list[int]]:
    answer = grounded_answer(qa) if opts.grounded_output else qa.answer
    question = vocab.encode_text(PROMPT_QUESTION.format(q=qa.question))
    response = vocab.encode_text(answer) + [vocab.EOS]
    return question, response


def _context_words(doc: Document, opts: SftOptions) -> list[OcrWord]:
    if opts.shuffled:
        return shuffle_words(doc, np.random.default_rng(opts.seed)).words
    return list(doc.words)


def _finish(b: _Builder, question, response, meta) -> InterleavedSample:
    b.text(question)
    start = len(b.ids)
    b.text(response, loss=1)
    return b.sample(start, meta)


def _meta(doc, qa, scheme, opts, keep):
    return {"doc": doc.id, "q": qa.question, "scheme": scheme, "shuffled": opts.shuffled, "words": keep}


def build_sft_sample(
    doc: Document, qa: QaPair, vocab: Vocab, opts: SftOptions = SftOptions(), max_len: int = 512
) -> InterleavedSample:
    """``[BOS, interleaved context, question, answer, EOS]``; loss on answer + EOS."""
    question, response = _qa_tail(qa, vocab, opts)
    words = _context_words(doc, opts)
    groups = _interleaved_groups(words, vocab)
    budget = max_len - 1 - len(question) - len(response)
    if budget < 0:
        raise ContractError(f"question and answer alone exceed max_len={max_len}")
    keep = _fit_words([1 + len(g) for g in groups], budget)
    b = _Builder()
    b.text([vocab.BOS])
    for w, g in zip(words[:keep], groups[:keep]):
        b.box(vocab, w.box)
        b.text(g)
    return _finish(b, question, response, _meta(doc, qa, "interleaved", opts, keep))


def build_plain_sample(
    doc: Document, qa: QaPair, vocab: Vocab, opts: SftOptions = SftOptions(), max_len: int = 512
) -> InterleavedSample:
    """Text-only prompt: per-word tokens joined by a separator token."""
    question, response = _qa_tail(qa, vocab, opts)
    words = _context_words(doc, opts)
    sep = vocab.encode_text(SEPARATOR)
    groups = [(sep if i else []) + vocab.encode_word(w.text) for i, w in enumerate(words)]
    budget = max_len - 1 - len(question) - len(response)
    if budget < 0:
        raise ContractError(f"question and answer alone exceed max_len={max_len}")
    keep = _fit_words([len(g) for g in groups], budget)
    b = _Builder()
    b.text([vocab.BOS])
    for g in groups[:keep]:
        b.text(g)
    return _finish(b, question, response, _meta(doc, qa, "plain", opts, keep))


def build_coord_token_sample(
    doc: Document, qa: QaPair, vocab: Vocab, max_len: int = 512, opts: SftOptions = SftOptions()
) -> InterleavedSample:
    """Coordinate-as-tokens prompt: ``text[x1,y1,x2,y2]`` per word, all plain text."""
    question, response = _qa_tail(qa, vocab, opts)
    words = _context_words(doc, opts)
    budget = max_len - 1 - len(question) - len(response)
    if budget < 0:
        raise ContractError(f"question and answer alone exceed max_len={max_len}")
    keep = len(words)
    while True:
        ctx = vocab.encode_text(SEPARATOR.join(w.text + format_box(w.box) for w in words[:keep]))
        if len(ctx) <= budget:
            break
        keep -= 1
    b = _Builder()
    b.text([vocab.BOS])
    b.text(ctx)
    return _finish(b, question, response, _meta(doc, qa, "coord_tokens", opts, keep))


BUILDERS = {
    "interleaved": build_sft_sample,
    "plain": build_plain_sample,
    "coord_tokens": lambda doc, qa, vocab, opts=SftOptions(), max_len=512: build_coord_token_sample(
        doc, qa, vocab, max_len, opts
    ),
}


def build_sample(scheme: str, doc, qa, vocab, opts=SftOptions(), max_len=512) -> InterleavedSample:
    try:
        builder = BUILDERS[scheme]
    except KeyError:
        raise ContractError(f"unknown scheme {scheme!r}") from None
    return builder(doc, qa, vocab, opts, max_len)


def parse_box_text(text: str) -> tuple[int, int, int, int] | None:
    m = _BOX_RE.fullmatch(text)
    return None if m is None else tuple(int(g) for g in m.groups())
