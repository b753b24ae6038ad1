"""Byte-level BPE tokenizer and per-scheme sequence-length accounting.

Merges are learned inside whitespace-delimited chunks, so no merged token
spans a separator and a word tokenizes the same alone or in running text.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, ParseError

SPECIAL_NAMES = ("BOS", "EOS", "PAD", "BOX")
N_BYTES = 256
BASE_SIZE = N_BYTES + len(SPECIAL_NAMES)
VOCAB_FORMAT = 1
SEPARATOR = " "
PROMPT_QUESTION = "\nQuestion: {q}\nAnswer:"
SCHEMES = ("plain", "interleaved", "coord_tokens")


def _merge_seq(seq: tuple[int, ...], pair: tuple[int, int], new_id: int) -> tuple[int, ...]:
    out = []
    i = 0
    n = len(seq)
    a, b = pair
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


@dataclass
class Vocab:
    """Trained merge table. Ids 0-255 are bytes, then the specials, then merges."""

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._bytes: list[bytes] = [bytes([i]) for i in range(N_BYTES)] + [b""] * len(SPECIAL_NAMES)
        for a, b in self.merges:
            if a >= len(self._bytes) or b >= len(self._bytes) or a in self.special_ids or b in self.special_ids:
                raise ParseError(f"merge ({a}, {b}) references an unknown or special id")
            self._bytes.append(self._bytes[a] + self._bytes[b])
        self._word_cache = lru_cache(maxsize=65536)(self._encode_bytes)

    # special ids
    BOS = N_BYTES
    EOS = N_BYTES + 1
    PAD = N_BYTES + 2
    BOX = N_BYTES + 3

    @property
    def special_ids(self) -> dict[str, int]:
        return {name: N_BYTES + i for i, name in enumerate(SPECIAL_NAMES)}

    @property
    def size(self) -> int:
        return BASE_SIZE + len(self.merges)

    def __len__(self) -> int:
        return self.size

    def token_bytes(self, tid: int) -> bytes:
        return self._bytes[tid]

    def _encode_bytes(self, data: bytes) -> tuple[int, ...]:
        seq = list(data)
        ranks = self._ranks
        while len(seq) > 1:
            best = None
            best_rank = None
            for i in range(len(seq) - 1):
                r = ranks.get((seq[i], seq[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best = r, (seq[i], seq[i + 1])
            if best is None:
                break
            seq = list(_merge_seq(tuple(seq), best, BASE_SIZE + best_rank))
        return tuple(seq)

    def encode_word(self, word: str) -> list[int]:
        """Merges applied inside a single OCR word."""
        if not word:
            return []
        return list(self._word_cache(word.encode("utf-8")))

    def encode_text(self, text: str) -> list[int]:
        """Merges applied to the whole string; no learned merge spans whitespace."""
        if not text:
            return []
        return list(self._word_cache(text.encode("utf-8")))

    def decode(self, ids: Iterable[int]) -> str:
        raw = b"".join(self._bytes[i] for i in ids if 0 <= i < len(self._bytes))
        return raw.decode("utf-8", errors="replace")

    def to_json(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "merges": [list(m) for m in self.merges],
            "specials": self.special_ids,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Vocab:
        try:
            specials = obj["specials"]
            merges = obj["merges"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"vocab JSON missing field {exc}") from exc
        if specials != {name: N_BYTES + i for i, name in enumerate(SPECIAL_NAMES)}:
            raise ParseError(f"unexpected special-token layout {specials}")
        return cls([tuple(int(x) for x in m) for m in merges])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid vocab JSON ({exc.msg})") from exc
        return cls.from_json(obj)


def train_bpe(texts: Iterable[str], vocab_size: int = 2048) -> Vocab:
    """Greedy most-frequent-pair merging until ``vocab_size`` or no pair repeats.

    Pairs are counted inside whitespace-delimited chunks, so no merge ever
    contains a space and a word gets the same tokens wherever it appears
    between spaces. Ties go to the smallest (left, right) id pair, so
    training is a pure function of the corpus contents.
    """
    if vocab_size < BASE_SIZE:
        raise ContractError(f"vocab_size must be >= {BASE_SIZE}")
    counts = Counter(chunk.encode("utf-8") for t in texts for chunk in t.split())
    if not counts and vocab_size > BASE_SIZE:
        raise ContractError("cannot learn merges from an empty corpus")
    seqs: list[tuple[int, ...]] = [tuple(b) for b in counts]
    freqs: list[int] = list(counts.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for idx, seq in enumerate(seqs):
        f = freqs[idx]
        for p in zip(seq, seq[1:]):
            pair_counts[p] += f
            where[p].add(idx)

    merges: list[tuple[int, int]] = []
    while BASE_SIZE + len(merges) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        new_id = BASE_SIZE + len(merges)
        merges.append(best)
        for idx in sorted(where.pop(best, ())):
            old = seqs[idx]
            f = freqs[idx]
            new = _merge_seq(old, best, new_id)
            for p in zip(old, old[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(idx)
            seqs[idx] = new
        pair_counts.pop(best, None)
    return Vocab(merges)


# ---------------------------------------------------------------------------
# sequence-length accounting
# ---------------------------------------------------------------------------


def format_box(box) -> str:
    """Integer-percent box text, e.g. ``[66,1,70,15]``."""
    q = [int(v * 100 + 0.5) for v in box.as_list()]
    return "[" + ",".join(str(v) for v in q) + "]"


def coord_serialization(words: Sequence) -> str:
    return SEPARATOR.join(w.text + format_box(w.box) for w in words)


def seqlen_report(doc, vocab: Vocab, scheme: str) -> int:
    """Context token count of ``doc`` under one input scheme.

    plain: per-word tokens plus one separator between words.
    interleaved: plain plus one box slot per word.
    coord_tokens: whole-string encoding of ``text[x1,y1,x2,y2]`` words.
    """
    if scheme not in SCHEMES:
        raise ContractError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    words = doc.words
    if not words:
        return 0
    if scheme == "coord_tokens":
        return len(vocab.encode_text(coord_serialization(words)))
    plain = sum(len(vocab.encode_word(w.text)) for w in words) + len(words) - 1
    if scheme == "plain":
        return plain
    return plain + len(words)


def corpus_texts(docs) -> list[str]:
    """Strings a desk vocab is trained on: page text plus prompted QA strings."""
    out = []
    for d in docs:
        out.append(SEPARATOR.join(w.text for w in d.words))
        for q in d.qa:
            out.append(PROMPT_QUESTION.format(q=q.question))
            out.append(q.answer)
    return out
