"""Run both training stages on a handful of receipts and read the answers back.

Pre-training updates only the box projection and the partial adapters, so the
backbone stays exactly at its initialization. Fine-tuning then unfreezes
everything and learns to answer the questions.

Run: python3 demos/02_pretrain_then_sft.py   (a few seconds on one core)
"""

from dataclasses import replace

import numpy as np

from laytext.corpus import synth_kv_documents
from laytext.evaluation import evaluate
from laytext.model import ModelConfig, init_params
from laytext.tokenizer import corpus_texts, train_bpe
from laytext.training import TrainConfig, pretrain, sft


def main():
    docs = [replace(d, qa=d.qa[:1]) for d in synth_kv_documents(10, 10)]
    vocab = train_bpe(corpus_texts(docs), 600)
    cfg = ModelConfig(vocab_size=vocab.size, d_model=64, n_layers=2, n_heads=4, plora_rank=8, max_seq_len=128)
    params = init_params(cfg, 0)
    before = params.copy()
    print(f"model: {sum(p.data.size for p in params.tensors.values())} parameters, "
          f"{params.adapter_param_count()} of them in adapters")

    pre = pretrain(docs, params, TrainConfig.for_stage("pretrain", lr=3e-3, epochs=5, batch_size=5, max_len=128), vocab)
    frozen = all(np.array_equal(params[n].data, before[n].data) for n in params.names(["backbone"]))
    print(f"pre-training loss {pre.epoch_losses[0]:.3f} -> {pre.epoch_losses[-1]:.3f}; backbone untouched: {frozen}")

    tc = TrainConfig(stage="sft", lr=3e-3, epochs=200, batch_size=5, max_len=128, warmup_ratio=0.05)
    result = sft(docs, params, tc, vocab)
    print(f"SFT loss {result.epoch_losses[0]:.3f} -> {result.epoch_losses[-1]:.4f} "
          f"({sum(result.shuffled_flags)} of {len(docs)} samples trained on shuffled OCR)")

    report = evaluate(result.params, vocab, docs, max_len=128)
    for r in report.records:
        mark = "ok " if r.prediction == r.gold else "bad"
        print(f"  {mark} {r.question:<32} gold {r.gold:<10} predicted {r.prediction}")
    print(f"accuracy {report.aggregates['accuracy']:.2f}, ANLS {report.aggregates['anls']:.2f}")


if __name__ == "__main__":
    main()
