"""Single-utterance latency of the parser by output length."""
from __future__ import annotations

import time

import numpy as np
import torch

from ..x2parser import X2Parser, parse_utterance

DEFAULT_BUCKETS = (5, 10, 20, 40)


def bench_latency(model: X2Parser, buckets=DEFAULT_BUCKETS, repeats: int = 20, warmup: int = 10, seed: int = 0):
    """Median wall-clock per flattened output length, batch size one.

    For a bucket of length L the input has L tokens with fertility forced to
    one, so the slot decoder emits exactly L labels. Each row also records how
    many times the slot decoder ran for one utterance.
    """
    rng = np.random.default_rng(seed)
    words = [w for w in model.vocab.itos[2:]] or ["x"]
    rows = []
    with torch.no_grad():
        for L in buckets:
            tokens = [words[int(i)] for i in rng.integers(len(words), size=L)]
            fert = [1] * L
            for _ in range(warmup):
                parse_utterance(tokens, model, fert)
            times = []
            calls = None
            for _ in range(repeats):
                t0 = time.perf_counter()
                res = parse_utterance(tokens, model, fert)
                times.append(time.perf_counter() - t0)
                calls = res.decoder_calls
            rows.append({"length": L, "flattened_length": sum(res.fertility), "decoder_calls": calls,
                         "median_ms": 1000 * float(np.median(times))})
    return rows


def structural_view(rows):
    """The timing-free part of a latency table (stable across runs)."""
    return [{k: v for k, v in r.items() if k != "median_ms"} for r in rows]
