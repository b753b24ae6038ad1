"""Two-stage training: layout-aware next-token pre-training, then shuffled-OCR SFT.

Pre-training freezes the backbone and updates only the layout projector and
the partial-LoRA adapters. SFT unfreezes everything and shuffles the OCR word
order of a seeded fraction of examples.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Document
from .errors import ConfigError, ContractError, NumericError
from .model import Batch, ModelParams, collate, lm_loss, save_checkpoint
from .numerics import OptimState
from .sequencer import InterleavedSample, SftOptions, build_pretrain_sample, build_sample
from .tokenizer import Vocab

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft")
FREEZE_POLICY = {"pretrain": ("slp", "adapter"), "sft": ("slp", "adapter", "backbone")}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; defaults follow the reference recipe."""

    stage: str = "sft"
    lr: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_ratio: float = 0.005
    epochs: int = 2
    batch_size: int = 16
    max_len: int = 512
    shuffle_ratio: float = 0.2
    seed: int = 0
    grad_clip: float = 1.0
    scheme: str = "interleaved"
    grounded: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0.0 <= self.shuffle_ratio <= 1.0:
            raise ConfigError(f"shuffle_ratio must lie in [0, 1], got {self.shuffle_ratio}")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in (0, 1), got {self.warmup_ratio}")
        if self.epochs < 1 or self.batch_size < 1 or self.max_len < 2:
            raise ConfigError("epochs, batch_size must be >= 1 and max_len >= 2")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> TrainConfig:
        lr = 1e-4 if stage == "pretrain" else 2e-5
        return cls(**{"stage": stage, "lr": lr, **overrides})

    @classmethod
    def from_dict(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_ratio * total_steps
    if step < warm:
        return cfg.lr * step / warm
    if total_steps == warm:
        return cfg.lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimState
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    epoch_losses: list[float] = field(default_factory=list)
    shuffled_flags: list[bool] = field(default_factory=list)


def shuffle_flags(n: int, ratio: float, seed: int) -> list[bool]:
    """Per-example Bernoulli(ratio) shuffle decisions, each from its own seeded stream."""
    return [bool(np.random.default_rng([seed, 1, i]).random() < ratio) for i in range(n)]


def assemble_sft_samples(
    corpus: Sequence[Document], vocab: Vocab, cfg: TrainConfig
) -> tuple[list[InterleavedSample], list[bool]]:
    """One sample per QA pair; each independently shuffled with ``cfg.shuffle_ratio``."""
    pairs = [(d, q) for d in corpus for q in d.qa]
    if not pairs:
        raise ContractError("SFT corpus contains no QA pairs")
    flags = shuffle_flags(len(pairs), cfg.shuffle_ratio, cfg.seed)
    samples = []
    for i, ((doc, qa), shuf) in enumerate(zip(pairs, flags)):
        opts = SftOptions(shuffled=shuf, grounded_output=cfg.grounded, seed=cfg.seed * 1_000_003 + i)
        samples.append(build_sample(cfg.scheme, doc, qa, vocab, opts, cfg.max_len))
    return samples, flags


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, 2, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_samples(
    samples: Sequence[InterleavedSample],
    params: ModelParams,
    cfg: TrainConfig,
    vocab: Vocab,
    run_dir: Path | None = None,
    opt_state: OptimState | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Shared optimizer loop; the stage's freeze policy picks trainable groups."""
    if not samples:
        raise ContractError("no training samples")
    trainable = FREEZE_POLICY[cfg.stage]
    params.set_trainable(trainable)
    names = [n for n in params.names(trainable)]
    state = opt_state or OptimState()
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    result = TrainResult(params, state)
    loss_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        loss_file = open(run_dir / "loss.csv", "a" if start_epoch else "w", newline="")
        writer = csv.writer(loss_file)
        if not start_epoch:
            writer.writerow(["step", "lr", "loss"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            epoch_loss = []
            for b, idx in enumerate(_batches(len(samples), cfg.batch_size, cfg.seed, epoch)):
                step = epoch * steps_per_epoch + b
                batch = collate([samples[i] for i in idx], vocab.PAD)
                loss = lm_loss(params, batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {step} (epoch {epoch}, batch {b})")
                nx.backward(loss)
                grads = {}
                for n in names:
                    g = params[n].grad
                    grads[n] = np.zeros_like(params[n].data) if g is None else g
                    params[n].grad = None
                if cfg.grad_clip:
                    nx.clip_grads(grads, cfg.grad_clip)
                lr = lr_at(step + 1, total, cfg)
                nx.adam_step(params.tensors, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
                result.losses.append((step + 1, lr, value))
                epoch_loss.append(value)
                if loss_file is not None:
                    writer.writerow([step + 1, repr(lr), repr(value)])
            result.epoch_losses.append(float(np.mean(epoch_loss)))
            log.info("%s epoch %d mean loss %.4f", cfg.stage, epoch + 1, result.epoch_losses[-1])
            if run_dir is not None:
                loss_file.flush()
                save_checkpoint(
                    run_dir / f"checkpoint_epoch{epoch + 1}.npz",
                    params,
                    vocab,
                    state,
                    {"epoch": epoch + 1, "train_config": cfg.to_dict()},
                )
            if on_epoch is not None:
                on_epoch(epoch, params)
    finally:
        if loss_file is not None:
            loss_file.close()
        params.set_trainable(None)
    if run_dir is not None:
        save_checkpoint(run_dir / "final.npz", params, vocab, state, {"epoch": cfg.epochs, "train_config": cfg.to_dict()})
    return result


def pretrain(
    corpus: Sequence[Document],
    params: ModelParams,
    cfg: TrainConfig,
    vocab: Vocab,
    run_dir: Path | None = None,
    **kw,
) -> TrainResult:
    """Layout-aware next-token prediction with the backbone frozen."""
    if cfg.stage != "pretrain":
        raise ContractError("pretrain needs cfg.stage == 'pretrain'")
    docs = [d for d in corpus if d.words]
    if not docs:
        raise ContractError("pre-training corpus is empty")
    samples = [build_pretrain_sample(d, vocab, cfg.max_len) for d in docs]
    return train_samples(samples, params, cfg, vocab, run_dir, **kw)


def sft(
    corpus: Sequence[Document],
    params: ModelParams,
    cfg: TrainConfig,
    vocab: Vocab,
    run_dir: Path | None = None,
    **kw,
) -> TrainResult:
    """Supervised fine-tuning on QA pairs with all parameters trainable."""
    if cfg.stage != "sft":
        raise ContractError("sft needs cfg.stage == 'sft'")
    samples, flags = assemble_sft_samples(corpus, vocab, cfg)
    result = train_samples(samples, params, cfg, vocab, run_dir, **kw)
    result.shuffled_flags = flags
    return result


def shuffle_sweep(
    corpus: Sequence[Document],
    params0: ModelParams,
    cfg: TrainConfig,
    vocab: Vocab,
    test_docs: Sequence[Document],
    ratios: Sequence[float] = (1.0, 0.5, 0.2, 0.0),
    eval_seed: int = 0,
) -> list[dict]:
    """One SFT run per training shuffle ratio, scored on a fully shuffled test set."""
    from .evaluation import evaluate

    rows = []
    for ratio in ratios:
        run_cfg = replace(cfg, shuffle_ratio=float(ratio))
        result = sft(corpus, params0.copy(), run_cfg, vocab)
        report = evaluate(result.params, vocab, test_docs, scheme=cfg.scheme, shuffled=True, seed=eval_seed)
        rows.append(
            {
                "train_shuffle_ratio": float(ratio),
                "accuracy": report.aggregates["accuracy"],
                "anls": report.aggregates["anls"],
                "final_loss": result.epoch_losses[-1],
            }
        )
    return rows


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["train_shuffle_ratio", "accuracy", "anls", "final_loss"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_config_snapshot(path, model_cfg, train_cfg: TrainConfig, extra: dict | None = None) -> None:
    snap = {"model": asdict(model_cfg), "train": train_cfg.to_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(snap, indent=2, sort_keys=True), encoding="utf-8")
