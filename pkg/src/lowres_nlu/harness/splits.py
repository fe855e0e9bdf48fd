"""Few-shot subsets and upsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SplitSpec:
    mode: str = "few-shot"
    fraction: float | None = None
    count: int | None = None
    seed: int = 0
    upsample: int = 1

    def __post_init__(self):
        if self.mode not in ("zero-shot", "few-shot"):
            raise ValueError("mode must be zero-shot or few-shot")
        if self.fraction is not None and not 0 <= self.fraction <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        if self.count is not None and self.count < 0:
            raise ValueError("count must be >= 0")
        if self.upsample < 1:
            raise ValueError("upsample factor must be >= 1")
        if self.mode == "few-shot" and (self.fraction is None) == (self.count is None):
            raise ValueError("few-shot needs exactly one of fraction or count")

    def size(self, n: int) -> int:
        if self.mode == "zero-shot":
            return 0
        k = self.count if self.count is not None else math.floor(self.fraction * n + 1e-9)
        if k > n:
            raise ValueError(f"asked for {k} samples from {n}")
        return k


def few_shot_split(dataset, spec: SplitSpec):
    """Uniform sample without replacement: ``(train subset, remainder)``, both in original order."""
    data = list(dataset)
    k = spec.size(len(data))
    chosen = set(np.random.default_rng(spec.seed).permutation(len(data))[:k].tolist())
    return ([x for i, x in enumerate(data) if i in chosen],
            [x for i, x in enumerate(data) if i not in chosen])


def upsample(subset, factor: int):
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    return [x for x in subset for _ in range(factor)]


def joint_mix(source, target_subset, factor: int = 1):
    """Source data plus the upsampled target subset."""
    return list(source) + upsample(target_subset, factor)
