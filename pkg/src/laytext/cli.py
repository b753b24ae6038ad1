"""Batch command line: synth, pretrain, sft, eval, seqlen, sweep.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
``LAYTEXT_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .corpus import SynthSpec, load_documents, save_documents, synth_kv_documents
from .errors import ConfigError, NumericError, ValidationError
from .evaluation import evaluate, perf_vs_length_csv, write_perf_vs_length, write_report
from .model import ModelConfig, init_params, load_checkpoint
from .tokenizer import SCHEMES, Vocab, corpus_texts, seqlen_report, train_bpe
from .training import TrainConfig, pretrain, sft, shuffle_sweep, write_config_snapshot, write_sweep_csv

log = logging.getLogger("laytext")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

# desk-scale model defaults; the optimizer defaults live on TrainConfig
DEFAULT_MODEL = {"d_model": 64, "n_layers": 3, "n_heads": 4, "plora_rank": 8, "max_seq_len": 256}
DEFAULT_VOCAB_SIZE = 2048


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    version: str = __version__
    argv: list = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str), encoding="utf-8")


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# layered configuration: defaults < config file < flags
# ---------------------------------------------------------------------------


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(obj, dict) or set(obj) - {"model", "train", "vocab_size"}:
        raise ConfigError(f"{p}: expected an object with keys among model, train, vocab_size")
    return obj


def _train_overrides(args) -> dict:
    keys = ("lr", "epochs", "batch_size", "max_len", "shuffle_ratio", "scheme", "weight_decay", "warmup_ratio")
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "grounded", False):
        out["grounded"] = True
    out["seed"] = args.seed
    return out


def resolve_configs(stage: str, args) -> tuple[ModelConfig, TrainConfig, int]:
    file_cfg = _read_config(getattr(args, "config", None))
    model_cfg = ModelConfig.from_dict({**DEFAULT_MODEL, **file_cfg.get("model", {})})
    train_dict = {**TrainConfig.for_stage(stage).to_dict(), **file_cfg.get("train", {})}
    train_dict.update(_train_overrides(args))
    train_dict["stage"] = stage
    train_cfg = TrainConfig.from_dict(train_dict)
    vocab_size = int(file_cfg.get("vocab_size", DEFAULT_VOCAB_SIZE))
    if getattr(args, "vocab_size", None) is not None:
        vocab_size = args.vocab_size
    return model_cfg, train_cfg, vocab_size


def _load_corpus(path: str):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"corpus not found: {p}")
    return load_documents(p)


def _model_and_vocab(args, corpus, model_cfg: ModelConfig, vocab_size: int):
    """Start from ``--init`` when given, otherwise fresh weights sized to the vocab."""
    if getattr(args, "init", None):
        ckpt = load_checkpoint(args.init)
        return ckpt.params, ckpt.vocab
    if getattr(args, "vocab", None):
        vocab = Vocab.load(args.vocab)
    else:
        vocab = train_bpe(corpus_texts(corpus), vocab_size)
    cfg = replace(model_cfg, vocab_size=vocab.size)
    return init_params(cfg, args.seed), vocab


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    spec = SynthSpec(trap_fraction=args.trap_fraction, value_pool=args.value_pool)
    out = Path(args.out)
    RunManifest("synth", asdict(spec) | {"n_docs": args.n_docs}, {}, {"corpus": str(out)}, args.seed).write(
        _manifest_path(out, False)
    )
    if args.n_docs < 0:
        raise ValidationError("--n-docs must be non-negative")
    save_documents(synth_kv_documents(args.seed, args.n_docs, spec), out)


def _cmd_train(stage: str, args) -> None:
    model_cfg, train_cfg, vocab_size = resolve_configs(stage, args)
    out = Path(args.out_dir)
    RunManifest(
        stage,
        {"model": asdict(model_cfg), "train": train_cfg.to_dict(), "vocab_size": vocab_size},
        {"corpus": args.corpus, "init": args.init, "vocab": args.vocab},
        {"run_dir": str(out)},
        args.seed,
        argv=list(args.argv),
    ).write(_manifest_path(out, True))
    corpus = _load_corpus(args.corpus)
    params, vocab = _model_and_vocab(args, corpus, model_cfg, vocab_size)
    vocab.save(out / "vocab.json")
    write_config_snapshot(out / "config.json", params.config, train_cfg, {"vocab_size": vocab.size})
    run = pretrain if stage == "pretrain" else sft
    result = run(corpus, params, train_cfg, vocab, out)
    log.info("%s finished: final epoch loss %.4f", stage, result.epoch_losses[-1])


def cmd_pretrain(args) -> None:
    _cmd_train("pretrain", args)


def cmd_sft(args) -> None:
    _cmd_train("sft", args)


def cmd_eval(args) -> None:
    out = Path(args.out)
    RunManifest(
        "eval",
        {"scheme": args.scheme, "grounded": args.grounded, "shuffled": args.shuffled},
        {"checkpoint": args.checkpoint, "corpus": args.corpus},
        {"report_dir": str(out)},
        args.seed,
    ).write(_manifest_path(out, True))
    if not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    docs = _load_corpus(args.corpus)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(
        ckpt.params, ckpt.vocab, docs, scheme=args.scheme, grounded=args.grounded, shuffled=args.shuffled, seed=args.seed
    )
    write_report(report, out)
    write_perf_vs_length(perf_vs_length_csv([report]), out / "perf_vs_length.csv")


def cmd_seqlen(args) -> None:
    out = Path(args.out)
    RunManifest("seqlen", {"schemes": list(SCHEMES)}, {"corpus": args.corpus, "vocab": args.vocab}, {"csv": str(out)}, args.seed).write(
        _manifest_path(out, False)
    )
    docs = _load_corpus(args.corpus)
    vocab = Vocab.load(args.vocab)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["doc_id", "n_words", *SCHEMES])
        for d in docs:
            w.writerow([d.id, len(d.words), *(seqlen_report(d, vocab, s) for s in SCHEMES)])


def _parse_ratios(text: str) -> list[float]:
    try:
        ratios = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise ValidationError(f"--ratios must be comma-separated numbers, got {text!r}") from None
    if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ValidationError("--ratios must be non-empty and lie in [0, 1]")
    return ratios


def cmd_sweep(args) -> None:
    model_cfg, train_cfg, vocab_size = resolve_configs("sft", args)
    ratios = _parse_ratios(args.ratios)
    out = Path(args.out)
    RunManifest(
        "sweep",
        {"model": asdict(model_cfg), "train": train_cfg.to_dict(), "vocab_size": vocab_size, "ratios": ratios},
        {"corpus": args.corpus, "test_corpus": args.test_corpus, "init": args.init, "vocab": args.vocab},
        {"csv": str(out)},
        args.seed,
    ).write(_manifest_path(out, False))
    corpus = _load_corpus(args.corpus)
    if args.test_corpus:
        test = _load_corpus(args.test_corpus)
    else:
        # hold out the last fifth of the corpus
        cut = len(corpus) - max(1, len(corpus) // 5)
        corpus, test = corpus[:cut], corpus[cut:]
    params, vocab = _model_and_vocab(args, corpus, model_cfg, vocab_size)
    rows = shuffle_sweep(corpus, params, train_cfg, vocab, test, ratios, eval_seed=args.seed)
    write_sweep_csv(rows, out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser, shuffle_default=None) -> None:
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON file with optional 'model', 'train', 'vocab_size' sections")
    p.add_argument("--init", help="checkpoint to start from (weights and vocabulary)")
    p.add_argument("--vocab", help="vocabulary JSON; trained on the corpus when omitted")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--shuffle-ratio", type=float, default=shuffle_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="laytext", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"laytext {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic key-value corpus")
    p.add_argument("--n-docs", type=int, required=True)
    p.add_argument("--trap-fraction", type=float, default=0.5)
    p.add_argument("--value-pool", type=int, default=SynthSpec.value_pool)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="layout-aware next-token pre-training")
    _train_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sft", help="shuffled-OCR supervised fine-tuning")
    _train_flags(p, shuffle_default=0.2)
    p.add_argument("--grounded", action="store_true", help="train on answers with coordinate suffixes")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("eval", help="greedy-decode and score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--scheme", choices=SCHEMES, default="interleaved")
    p.add_argument("--grounded", action="store_true")
    p.add_argument("--shuffled", action="store_true", help="permute OCR words before prompting")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("seqlen", help="per-document sequence length under each scheme")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seqlen)

    p = sub.add_parser("sweep", help="SFT shuffle-ratio sweep scored on shuffled test inputs")
    _train_flags(p)
    p.add_argument("--test-corpus", help="held-out corpus; defaults to the last fifth of --corpus")
    p.add_argument("--ratios", default="1.0,0.5,0.2,0.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    for name, sp in sub.choices.items():
        sp.add_argument("--seed", type=int, default=0)
    return parser


def _threads() -> int | None:
    raw = os.environ.get("LAYTEXT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"LAYTEXT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError("LAYTEXT_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # ValidationError, ContractError and ConfigError are all ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
