"""Augmentation and pretraining-corpus utilities.

Word-order shuffling with a bounded displacement, noisy test sets, BERT-style
token masking with a span-forming variant, and entity-driven corpus selection.
All functions are deterministic in ``(input, seed)``.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .bio import spans_from_bio

INF = math.inf
ENUMERATE_UP_TO = 8
MASK_TOKEN = "[MASK]"


# --------------------------------------------------------------------------
# word-order shuffling

@dataclass
class ShuffleSpec:
    k: float = INF
    copies: int = 10
    entity_spans: tuple = ()  # 0-based inclusive (start, end) pairs
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.k != INF:
            self.k = int(self.k)
        spans = sorted(tuple(s) for s in self.entity_spans)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 <= e1:
                raise ValueError(f"entity spans overlap: {spans}")
        if any(s > e for s, e in spans):
            raise ValueError(f"bad entity span in {spans}")
        self.entity_spans = tuple(spans)


def units(n: int, entity_spans=()) -> list[tuple[int, ...]]:
    """Group token indices into shuffle units; each entity span is one unit."""
    starts = {s: e for s, e in entity_spans}
    out, i = [], 0
    while i < n:
        e = starts.get(i, i)
        if e >= n:
            raise ValueError(f"entity span ({i}, {e}) exceeds length {n}")
        out.append(tuple(range(i, e + 1)))
        i = e + 1
    return out


def is_admissible(perm, k) -> bool:
    """``perm[j]`` is the source unit at output position ``j``."""
    return all(abs(src - j) <= k for j, src in enumerate(perm))


@lru_cache(maxsize=None)
def admissible_permutations(n: int, k) -> tuple[tuple[int, ...], ...]:
    if k == INF or k >= n - 1:
        return tuple(itertools.permutations(range(n)))
    return tuple(p for p in itertools.permutations(range(n)) if is_admissible(p, k))


def sample_permutation(n: int, k, rng: np.random.Generator) -> list[int]:
    """Draw a permutation with every displacement at most ``k``.

    Uniform over admissible permutations for ``n`` up to 8 (by enumeration);
    above that, sorts ``i + U(0, k + 1)`` which keeps the bound but is not
    uniform.
    """
    if n <= 1 or k == 0:
        return list(range(n))
    if k == INF:
        return rng.permutation(n).tolist()
    if n <= ENUMERATE_UP_TO:
        perms = admissible_permutations(n, k)
        return list(perms[int(rng.integers(len(perms)))])
    keys = np.arange(n) + rng.uniform(0, k + 1, size=n)
    return np.argsort(keys, kind="stable").tolist()


def shuffle_order(tokens, spec: ShuffleSpec, rng: np.random.Generator | None = None):
    """Return ``(shuffled tokens, token permutation)``.

    ``permutation[j]`` is the original index of the token now at ``j``.
    Entity spans move as one unit and keep their internal order.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    groups = units(len(tokens), spec.entity_spans)
    order = sample_permutation(len(groups), spec.k, rng)
    perm = [i for u in order for i in groups[u]]
    return [tokens[i] for i in perm], perm


def shuffle_labeled(tokens, labels, k, rng):
    """Shuffle a BIO-labeled sentence, keeping entity spans intact."""
    spans = [(s, e) for s, e, _ in spans_from_bio(labels)]
    _, perm = shuffle_order(tokens, ShuffleSpec(k=k, entity_spans=spans), rng)
    new_tokens = [tokens[i] for i in perm]
    new_labels = [labels[i] for i in perm]
    return new_tokens, new_labels


def make_noisy_testset(dataset, k, seed: int = 0):
    """Shuffle each ``(tokens, labels)`` pair once with displacement bound ``k``."""
    rng = np.random.default_rng(seed)
    return [shuffle_labeled(list(t), list(l), k, rng) for t, l in dataset]


def shuffle_augment(dataset, k=INF, copies: int = 10, seed: int = 0, include_original: bool = True):
    """``copies`` shuffled versions of every ``(tokens, labels)`` pair."""
    rng = np.random.default_rng(seed)
    out = []
    for t, l in dataset:
        if include_original:
            out.append((list(t), list(l)))
        out.extend(shuffle_labeled(list(t), list(l), k, rng) for _ in range(copies))
    return out


# --------------------------------------------------------------------------
# masking

ACTIONS = ("mask", "random", "keep")


@dataclass
class MaskPlan:
    n: int
    masked: tuple = ()
    actions: tuple = ()  # aligned with ``masked``

    def __post_init__(self):
        if len(self.masked) != len(self.actions):
            raise ValueError("one action per masked index")
        if any(a not in ACTIONS for a in self.actions):
            raise ValueError(f"actions must be in {ACTIONS}")

    def action_of(self, i):
        return dict(zip(self.masked, self.actions)).get(i)

    def runs(self) -> list[tuple[int, int]]:
        out = []
        for i in self.masked:
            if out and out[-1][1] == i - 1:
                out[-1] = (out[-1][0], i)
            else:
                out.append((i, i))
        return out

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "masked": list(self.masked), "actions": list(self.actions)})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["n"], tuple(d["masked"]), tuple(d["actions"]))


def mask_count(n: int, rate: float = 0.15) -> int:
    """Round-half-up of ``rate * n`` with a floor of one, for ``n >= 7``; zero for shorter input."""
    if rate <= 0 or n < 7:
        return 0
    return min(n, max(1, math.floor(rate * n + 0.5)))


def token_mask(tokens, rate: float = 0.15, seed: int = 0) -> MaskPlan:
    """Pick positions to mask and split them 80/10/10 into mask / random / keep."""
    n = tokens if isinstance(tokens, int) else len(tokens)
    rng = np.random.default_rng(seed)
    count = mask_count(n, rate)
    masked = sorted(rng.choice(n, size=count, replace=False).tolist()) if count else []
    draws = rng.choice(3, size=len(masked), p=[0.8, 0.1, 0.1])
    return MaskPlan(n, tuple(masked), tuple(ACTIONS[int(d)] for d in draws))


def _move_isolated(masked: list[int], n: int, attach: str) -> list[int]:
    current = set(masked)
    for i in sorted(masked):
        if i not in current or i - 1 in current or i + 1 in current:
            continue
        others = [j for j in current if j != i]
        if not others:
            break
        j = min(others, key=lambda x: (abs(x - i), x))
        a = b = j
        while a - 1 in current:
            a -= 1
        while b + 1 in current:
            b += 1
        slots = [s for s in (a - 1, b + 1) if 0 <= s < n]
        if attach == "left" and a - 1 >= 0:
            target = a - 1
        else:
            target = min(slots, key=lambda s: (abs(s - i), s))
        current.discard(i)
        current.add(target)
    return sorted(current)


def span_mask(tokens, rate: float = 0.15, seed: int = 0, attach: str = "nearest",
              plan: MaskPlan | None = None) -> MaskPlan:
    """Token masking, then move every isolated masked index next to another one.

    An isolated index moves beside the run holding its nearest masked
    neighbour (ties toward the lower index). ``attach="nearest"`` takes
    whichever free side of that run is closer to the original index;
    ``"left"`` always takes the run's left side when it exists. Runs of two
    or more are left alone and each moved index keeps its action.
    """
    if attach not in ("nearest", "left"):
        raise ValueError("attach must be 'nearest' or 'left'")
    plan = plan or token_mask(tokens, rate, seed)
    if plan.n <= 1 or len(plan.masked) < 2:
        return plan
    action = dict(zip(plan.masked, plan.actions))
    moved = _move_isolated(list(plan.masked), plan.n, attach)
    # carry actions: unmoved indices keep theirs, moved ones inherit in order
    leaving = [i for i in plan.masked if i not in moved]
    arriving = [i for i in moved if i not in action]
    for src, dst in zip(leaving, arriving):
        action[dst] = action.pop(src)
    return MaskPlan(plan.n, tuple(moved), tuple(action[i] for i in moved))


def apply_mask(tokens, plan: MaskPlan, vocab, seed: int = 0, mask_token: str = MASK_TOKEN):
    """Return ``(corrupted tokens, targets)``; targets are None where nothing is predicted."""
    rng = np.random.default_rng(seed)
    out = list(tokens)
    targets = [None] * len(tokens)
    for i, a in zip(plan.masked, plan.actions):
        targets[i] = tokens[i]
        if a == "mask":
            out[i] = mask_token
        elif a == "random":
            out[i] = vocab[int(rng.integers(len(vocab)))]
    return out, targets


# --------------------------------------------------------------------------
# pretraining corpus selection

@dataclass
class CorpusSpec:
    level: str = "entity"
    entities: list = field(default_factory=list)
    min_entities: int = 2
    task_factor: int = 2

    def __post_init__(self):
        if self.level not in ("domain", "entity", "task"):
            raise ValueError("level must be domain, entity or task")
        if self.min_entities < 1:
            raise ValueError("min_entities must be >= 1")
        if self.task_factor < 1:
            raise ValueError("task_factor must be >= 1")


def count_entity_hits(tokens, entity_tokens: dict) -> int:
    """Non-overlapping longest-first matches of multi-word entity surface forms."""
    hits, i, n = 0, 0, len(tokens)
    lengths = sorted(entity_tokens, reverse=True)
    while i < n:
        for L in lengths:
            if i + L <= n and tuple(tokens[i:i + L]) in entity_tokens[L]:
                hits += 1
                i += L
                break
        else:
            i += 1
    return hits


def _index_entities(entities) -> dict:
    table: dict[int, set] = {}
    for e in entities:
        words = tuple(e.lower().split())
        if words:
            table.setdefault(len(words), set()).add(words)
    return table


def select_corpus(sentences, spec: CorpusSpec) -> list[str]:
    """Keep sentences by entity hits: ``min_entities`` for the entity level, one for task level."""
    if spec.level == "domain":
        return list(sentences)
    if not spec.entities:
        raise ValueError(f"{spec.level}-level selection needs a non-empty entity list")
    table = _index_entities(spec.entities)
    need = spec.min_entities if spec.level == "entity" else 1
    return [s for s in sentences if count_entity_hits(s.lower().split(), table) >= need]


def integrate_corpora(entity_corpus, task_corpus, factor: int = 2, seed: int = 0) -> list[str]:
    """Entity-level sentences plus ``factor`` copies of the task-level ones, shuffled."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    merged = list(entity_corpus) + list(task_corpus) * factor
    if factor == 1:
        return merged
    order = np.random.default_rng(seed).permutation(len(merged))
    return [merged[i] for i in order]


def selection_ratio(selected, domain) -> float:
    return len(selected) / len(domain) if len(domain) else 0.0


def main(argv=None):
    p = argparse.ArgumentParser(description="shuffle a CoNLL file")
    p.add_argument("conll")
    p.add_argument("--k", type=float, default=INF)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    from .harness.io import load_conll
    for seq in make_noisy_testset([(s.tokens, s.labels) for s in load_conll(args.conll)], args.k, args.seed):
        print("\n".join(f"{t}\t{l}" for t, l in zip(*seq)) + "\n")


if __name__ == "__main__":
    main()
