"""Small builders shared by the model-level tests."""

import numpy as np

from laytext.model import Batch, ModelConfig

TINY = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=2, plora_rank=4, max_seq_len=32)


def random_batch(cfg, rng, B=2, T=9, box_frac=0.3, loss_frac=0.6, no_boxes=False):
    """Random ids with some box slots; box slots keep an arbitrary in-range id."""
    ids = rng.integers(0, cfg.vocab_size, (B, T))
    mod = np.zeros((B, T), dtype=np.int64) if no_boxes else (rng.random((B, T)) < box_frac).astype(np.int64)
    lo = rng.uniform(0, 0.5, (B, T, 2))
    hi = lo + rng.uniform(0, 0.5, (B, T, 2))
    boxes = np.concatenate([lo, hi], axis=-1) * mod[..., None]
    loss = ((rng.random((B, T)) < loss_frac) & (mod == 0)).astype(np.int64)
    loss[:, -1] = 0
    loss[0, 1] = 1 if not mod[0, 1] else loss[0, 1]
    # loss flags mark target tokens, so keep at least one unmasked target
    if not loss[:, 1:].any():
        mod[0, 1] = 0
        boxes[0, 1] = 0
        loss[0, 1] = 1
    return Batch(ids, mod, boxes, loss, np.full(B, T))
