"""Tiny decoder-only transformer with layout box tokens and partial LoRA.

Box slots are embedded by the spatial layout projector (an affine map from the
four normalized coordinates to ``d_model``). Every linear layer in the blocks
carries a low-rank adapter that is applied only to rows flagged as box tokens;
text rows see the frozen-able base weights alone.
"""

from __future__ import annotations

import io
import json
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .corpus import BBox
from .errors import ConfigError, ContractError, ParseError, ValidationError
from .numerics import OptimState, Tensor
from .sequencer import InterleavedSample
from .tokenizer import Vocab

CHECKPOINT_FORMAT = "laytext-checkpoint"
CHECKPOINT_VERSION = 1
LINEARS = ("q", "k", "v", "o", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    plora_rank: int = 16
    max_seq_len: int = 512
    rope_base: float = 10000.0
    mlp_mult: int = 4
    layout: bool = True
    init_std: float = 0.02
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if not 0 < self.plora_rank < min(self.d_model, self.mlp_hidden):
            raise ConfigError("plora_rank must be positive and below every adapted layer's width")
        if min(self.vocab_size, self.n_layers, self.max_seq_len, self.mlp_mult) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.d_model * self.mlp_mult

    def linear_dims(self, name: str) -> tuple[int, int]:
        """(C_in, C_out) of one adapted linear."""
        d, h = self.d_model, self.mlp_hidden
        return {"up": (d, h), "down": (h, d)}.get(name, (d, d))

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**obj)


class PLoraLayer(NamedTuple):
    W0: Tensor
    B0: Tensor
    WA: Tensor
    WB: Tensor


def param_group(name: str) -> str:
    if name.startswith("slp."):
        return "slp"
    if name.endswith(".WA") or name.endswith(".WB"):
        return "adapter"
    return "backbone"


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, groups: Sequence[str] | None = None) -> list[str]:
        return [n for n in self.tensors if groups is None or param_group(n) in groups]

    def layer(self, i: int, lin: str) -> PLoraLayer:
        p = f"layers.{i}.{lin}"
        t = self.tensors
        return PLoraLayer(t[p + ".W0"], t[p + ".B0"], t[p + ".WA"], t[p + ".WB"])

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def set_trainable(self, groups: Sequence[str] | None) -> None:
        for n, t in self.tensors.items():
            t.requires_grad = groups is None or param_group(n) in groups
            t.grad = None

    def adapter_param_count(self) -> int:
        return sum(self.tensors[n].size for n in self.names(["adapter"]))

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def expected_adapter_params(cfg: ModelConfig) -> int:
    total = 0
    for lin in LINEARS:
        c_in, c_out = cfg.linear_dims(lin)
        total += cfg.plora_rank * (c_in + c_out)
    return total * cfg.n_layers


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Normal(0, init_std) weights, unit norms, zero biases, zero WB."""
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    d, v, r = cfg.d_model, cfg.vocab_size, cfg.plora_rank
    t: dict[str, Tensor] = {}
    t["tok_emb"] = Tensor(rng.normal(0, std, (v, d)))
    if cfg.layout:
        t["slp.W"] = Tensor(rng.normal(0, std, (d, 4)))
        t["slp.b"] = Tensor(rng.normal(0, std, d))
    out_std = std / math.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        for norm in ("attn_norm", "mlp_norm"):
            t[f"layers.{i}.{norm}"] = Tensor(np.ones(d))
        for lin in LINEARS:
            c_in, c_out = cfg.linear_dims(lin)
            p = f"layers.{i}.{lin}"
            t[p + ".W0"] = Tensor(rng.normal(0, out_std if lin in ("o", "down") else std, (c_out, c_in)))
            t[p + ".B0"] = Tensor(np.zeros(c_out))
            t[p + ".WA"] = Tensor(rng.normal(0, 1.0 / math.sqrt(c_in), (r, c_in)))
            t[p + ".WB"] = Tensor(np.zeros((c_out, r)))
    t["norm_f"] = Tensor(np.ones(d))
    if not cfg.tie_embeddings:
        t["lm_head"] = Tensor(rng.normal(0, std, (v, d)))
    return ModelParams(cfg, t)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def slp_project(box: BBox, W, b) -> np.ndarray:
    """``W @ [x1, y1, x2, y2] + b``; no nonlinearity."""
    W = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    return W @ np.asarray(box.as_list()) + b


def plora_forward(x: Tensor, modality_mask, layer: PLoraLayer) -> Tensor:
    """Base affine map for every row plus ``WB @ WA @ x`` on box rows."""
    mask = np.asarray(modality_mask)
    if mask.shape != x.shape[:-1]:
        raise ContractError(f"modality mask shape {mask.shape} does not match input rows {x.shape[:-1]}")
    if x.shape[-1] != layer.W0.shape[1]:
        raise nx.DimensionError(f"input width {x.shape[-1]} != C_in {layer.W0.shape[1]}")
    out = nx.linear(x, layer.W0, layer.B0)
    if not mask.any():
        return out
    low = nx.linear(nx.linear(x, layer.WA), layer.WB)
    return out + nx.mul(low, mask[..., None].astype(np.float64))


def rope_apply(q, k, positions, base: float = 10000.0):
    """Rotate query and key arrays (..., T, head_dim) by their positions."""
    q, k = nx.as_tensor(q), nx.as_tensor(k)
    cos, sin = nx.rope_tables(np.asarray(positions), q.shape[-1], base)
    return nx.rope(q, cos, sin), nx.rope(k, cos, sin)


class Batch(NamedTuple):
    ids: np.ndarray  # (B, T) int
    modality: np.ndarray  # (B, T) int
    boxes: np.ndarray  # (B, T, 4)
    loss_mask: np.ndarray  # (B, T) int
    lengths: np.ndarray  # (B,)


def collate(samples: Sequence[InterleavedSample], pad_id: int) -> Batch:
    """Right-pad to the longest sample; padding is masked out of the loss."""
    n = len(samples)
    t = max(len(s) for s in samples)
    ids = np.full((n, t), pad_id, dtype=np.int64)
    mod = np.zeros((n, t), dtype=np.int64)
    boxes = np.zeros((n, t, 4))
    loss = np.zeros((n, t), dtype=np.int64)
    for i, s in enumerate(samples):
        L = len(s)
        ids[i, :L] = s.ids
        mod[i, :L] = s.modality_mask
        loss[i, :L] = s.loss_mask
        for pos, box in s.box_values:
            boxes[i, pos] = box.as_list()
    return Batch(ids, mod, boxes, loss, np.array([len(s) for s in samples]))


def forward_batch(params: ModelParams, batch: Batch, rows: np.ndarray | None = None) -> Tensor:
    """Logits (B, T, V), or (len(rows), V) for flattened row indices ``rows``.

    Right padding needs no key mask: causal attention never lets a real
    position see a later pad.
    """
    cfg = params.config
    ids, mod = batch.ids, batch.modality
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ContractError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id out of range for vocab_size {cfg.vocab_size}")
    has_box = bool(mod.any())
    if has_box and not cfg.layout:
        raise ContractError("box slots given to a model without a spatial layout projector")

    t = params.tensors
    x = nx.embedding(t["tok_emb"], ids)
    if has_box:
        z = nx.linear(Tensor(batch.boxes), t["slp.W"], t["slp.b"])
        x = nx.where(mod[..., None].astype(bool), z, x)

    H, dh = cfg.n_heads, cfg.head_dim
    cos, sin = nx.rope_tables(np.arange(T), dh, cfg.rope_base)
    causal = np.tril(np.ones((T, T), dtype=bool))
    scale = 1.0 / math.sqrt(dh)
    route = mod if has_box else np.zeros_like(mod)

    def heads(h):
        return nx.transpose(nx.reshape(h, (B, T, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        h = nx.rms_norm(x, t[f"layers.{i}.attn_norm"])
        q = nx.rope(heads(plora_forward(h, route, params.layer(i, "q"))), cos, sin)
        k = nx.rope(heads(plora_forward(h, route, params.layer(i, "k"))), cos, sin)
        v = heads(plora_forward(h, route, params.layer(i, "v")))
        att = nx.softmax(nx.mul(nx.matmul(q, nx.swap_last(k)), scale), causal)
        o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + plora_forward(o, route, params.layer(i, "o"))
        h = nx.rms_norm(x, t[f"layers.{i}.mlp_norm"])
        u = nx.silu(plora_forward(h, route, params.layer(i, "up")))
        x = x + plora_forward(u, route, params.layer(i, "down"))

    x = nx.rms_norm(x, t["norm_f"])
    if rows is not None:
        x = nx.take_rows(x, rows)
    return nx.linear(x, t["tok_emb"] if cfg.tie_embeddings else t["lm_head"])


def forward(sample: InterleavedSample, params: ModelParams) -> Tensor:
    """Logits (T, V) for one sample."""
    logits = forward_batch(params, collate([sample], pad_id=0))
    return nx.reshape(logits, logits.shape[1:])


def shifted_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Position i predicts token i+1; the mask follows the predicted token."""
    targets = np.zeros_like(batch.ids)
    mask = np.zeros_like(batch.loss_mask)
    targets[:, :-1] = batch.ids[:, 1:]
    mask[:, :-1] = batch.loss_mask[:, 1:]
    return targets, mask


def lm_loss(params: ModelParams, batch: Batch) -> Tensor:
    """Mean next-token NLL over positions whose target carries loss."""
    targets, mask = shifted_targets(batch)
    rows = np.flatnonzero(mask.reshape(-1))
    logits = forward_batch(params, batch, rows=rows)
    return nx.masked_cross_entropy(logits, targets.reshape(-1)[rows], np.ones(rows.size, dtype=np.int64))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def generate(
    params: ModelParams,
    prompt: InterleavedSample,
    max_new_tokens: int | None = None,
    eos_id: int = Vocab.EOS,
) -> list[int]:
    """Greedy (beam size 1) continuation of ``prompt``, stopping at EOS.

    ``max_new_tokens=None`` means 512 or whatever room the context window
    leaves, whichever is smaller.
    """
    cap = params.config.max_seq_len
    n = len(prompt.ids)
    if n == 0:
        raise ContractError("empty prompt")
    if n >= cap:
        raise ContractError(f"prompt length {n} leaves no room in max_seq_len {cap}")
    if max_new_tokens is None:
        max_new_tokens = min(512, cap - n)
    elif n + max_new_tokens > cap:
        raise ContractError(f"prompt length {n} + max_new_tokens {max_new_tokens} exceeds max_seq_len {cap}")
    base = collate([prompt], pad_id=0)
    ids = list(prompt.ids)
    out: list[int] = []
    with nx.no_grad():
        for _ in range(max_new_tokens):
            T = len(ids)
            extra = T - n
            batch = Batch(
                np.array([ids], dtype=np.int64),
                np.pad(base.modality, ((0, 0), (0, extra))),
                np.pad(base.boxes, ((0, 0), (0, extra), (0, 0))),
                np.zeros((1, T), dtype=np.int64),
                np.array([T]),
            )
            logits = forward_batch(params, batch, rows=np.array([T - 1]))
            nxt = int(np.argmax(logits.data[0]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


_GROUP_RE = re.compile(r"\[([^\[\]]*)\]")
_COORDS_RE = re.compile(r"\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*")


def parse_grounded_output(text: str) -> tuple[list[tuple[str, BBox | None]], list[str]]:
    """Split ``"value[x1,y1,x2,y2] ..."`` into (span, box) pairs.

    Returns the pairs and a list of diagnostics. Bracket groups that are not
    four integers in 0..100 with min <= max stay in the span text and are
    reported, never raised.
    """
    items: list[tuple[str, BBox | None]] = []
    diagnostics: list[str] = []
    span_start = 0
    for m in _GROUP_RE.finditer(text):
        cm = _COORDS_RE.fullmatch(m.group(1))
        box = None
        if cm is None:
            diagnostics.append(f"malformed coordinate group {m.group(0)!r} at {m.start()}")
        else:
            vals = [int(g) for g in cm.groups()]
            if max(vals) > 100:
                diagnostics.append(f"coordinate above 100 in {m.group(0)!r} at {m.start()}")
            else:
                try:
                    box = BBox(*(v / 100 for v in vals))
                except ValidationError:
                    diagnostics.append(f"inverted box {m.group(0)!r} at {m.start()}")
        if box is None:
            continue
        items.append((text[span_start : m.start()].strip(" ,;"), box))
        span_start = m.end()
    tail = text[span_start:].strip(" ,;")
    if tail:
        items.append((tail, None))
    return items, diagnostics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    params: ModelParams,
    vocab: Vocab | None = None,
    opt_state: OptimState | None = None,
    extra: dict | None = None,
) -> None:
    """Write an ``.npz`` container: JSON header plus raw float64 arrays."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": list(params.tensors),
        "vocab": vocab.to_json() if vocab is not None else None,
        "opt_step": opt_state.step if opt_state is not None else None,
        "opt_names": sorted(opt_state.m) if opt_state is not None else [],
        "extra": extra or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for n, t in params.items():
        arrays[f"param/{n}"] = t.data
    if opt_state is not None:
        for n in opt_state.m:
            arrays[f"adam_m/{n}"] = opt_state.m[n]
            arrays[f"adam_v/{n}"] = opt_state.v[n]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocab | None
    opt_state: OptimState | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
                raise ParseError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
            cfg = ModelConfig.from_dict(meta["config"])
            tensors = {n: Tensor(z[f"param/{n}"].copy()) for n in meta["tensors"]}
            opt = None
            if meta.get("opt_step") is not None:
                opt = OptimState(
                    {n: z[f"adam_m/{n}"].copy() for n in meta["opt_names"]},
                    {n: z[f"adam_v/{n}"].copy() for n in meta["opt_names"]},
                    int(meta["opt_step"]),
                )
    except (OSError, ValueError, KeyError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: unreadable checkpoint ({exc})") from exc
    vocab = Vocab.from_json(meta["vocab"]) if meta.get("vocab") else None
    return Checkpoint(ModelParams(cfg, tensors), vocab, opt, meta.get("extra", {}))
