"""Orthogonal refinement of cross-lingual word embeddings from a seed dictionary.

The mapping ``W`` maximizes ``Tr(X W Z^T D^T)`` over orthogonal matrices,
which is solved by the SVD of ``X^T D Z``. Also holds embedding I/O,
preprocessing and a small delexicalizer for numbers, times and durations.
"""
from __future__ import annotations

import argparse
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

DEFAULT_THRESHOLD = 0.25


# --------------------------------------------------------------------------
# I/O

def read_embeddings(path, limit: int | None = None) -> tuple[list[str], np.ndarray]:
    """Text format: a ``count dim`` header, then ``word v1 ... vd`` per line."""
    words, rows = [], []
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}:1: expected 'count dim' header")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(f, 2):
            if limit is not None and len(words) >= limit:
                break
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            words.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if limit is None and len(words) != count:
        raise ValueError(f"{path}: header says {count} words, found {len(words)}")
    return words, np.asarray(rows, dtype=np.float64).reshape(len(words), dim)


def write_embeddings(path, words, E) -> None:
    E = np.asarray(E)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(words)} {E.shape[1]}\n")
        for w, row in zip(words, E):
            f.write(w + " " + " ".join(f"{x:.8g}" for x in row) + "\n")


def read_seed_dictionary(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two tab-separated columns")
            pairs.append((parts[0], parts[1]))
    return pairs


def default_seed_dictionary(pair: str = "en-es") -> list[tuple[str, str]]:
    """Bundled 11-keyword seed pairs for ``en-es`` or ``en-th``."""
    name = {"en-es": "seed_en_es.tsv", "en-th": "seed_en_th.tsv"}[pair]
    with resources.as_file(resources.files("lowres_nlu") / "data" / name) as path:
        return read_seed_dictionary(path)


# --------------------------------------------------------------------------
# preprocessing and the orthogonal solver

def _normalize(E):
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError(f"zero vector at rows {np.flatnonzero(norms[:, 0] == 0).tolist()}")
    return E / norms


def preprocess(E) -> np.ndarray:
    """Length-normalize, mean-center, then length-normalize again."""
    E = _normalize(np.asarray(E, dtype=np.float64))
    E = E - E.mean(axis=0, keepdims=True)
    return _normalize(E)


def _pairs(D):
    """Accept a 0/1 ndarray or a list of ``(i, j)`` pairs; return index arrays."""
    if isinstance(D, np.ndarray):
        if D.ndim != 2 or not np.isin(D, (0, 1)).all():
            raise ValueError("dictionary matrix entries must be 0 or 1")
        src, tgt = np.nonzero(D)
    else:
        pairs = np.asarray(list(D), dtype=np.int64).reshape(-1, 2)
        src, tgt = pairs[:, 0], pairs[:, 1]
    if len(src) == 0:
        raise ValueError("dictionary has no pairs")
    return src, tgt


def objective(X, Z, D, W) -> float:
    """``Tr(X W Z^T D^T)`` = sum over dictionary pairs of ``x_i W z_j^T``."""
    src, tgt = _pairs(D)
    return float(np.einsum("ij,ij->", X[src] @ W, Z[tgt]))


def solve_mapping(X, Z, D) -> np.ndarray:
    """Orthogonal ``W`` maximizing the dictionary trace objective: ``U V^T`` from ``svd(X^T D Z)``."""
    src, tgt = _pairs(D)
    M = X[src].T @ Z[tgt]
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def mean_cosine_distance(X, Z, D, W) -> float:
    src, tgt = _pairs(D)
    a, b = X[src] @ W, Z[tgt]
    cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(np.mean(1.0 - cos))


@dataclass
class RefineResult:
    W: np.ndarray
    history: list = field(default_factory=list)  # trace objective per iteration
    distances: list = field(default_factory=list)  # mean seed-pair cosine distance per iteration
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)


def refine(X, Z, seed_pairs, threshold: float = DEFAULT_THRESHOLD, max_iters: int = 10) -> RefineResult:
    """Re-solve the mapping on the mapped source space until the seed pairs are close.

    Stops once the mean cosine distance over ``seed_pairs`` falls below
    ``threshold`` or after ``max_iters``; ``converged`` tells which.
    """
    d = X.shape[1]
    W = np.eye(d)
    result = RefineResult(W)
    for _ in range(max_iters):
        step = solve_mapping(X @ W, Z, seed_pairs)
        W = W @ step
        result.W = W
        result.history.append(objective(X, Z, seed_pairs, W))
        result.distances.append(mean_cosine_distance(X, Z, seed_pairs, W))
        if result.distances[-1] < threshold:
            result.converged = True
            break
    return result


def seed_index_pairs(pairs, src_words, tgt_words) -> list[tuple[int, int]]:
    """Map word pairs to row indices; unknown words raise ``KeyError``."""
    si = {w: i for i, w in enumerate(src_words)}
    ti = {w: i for i, w in enumerate(tgt_words)}
    missing = [a for a, _ in pairs if a not in si] + [b for _, b in pairs if b not in ti]
    if missing:
        raise KeyError(f"seed words missing from the embedding tables: {missing}")
    return [(si[a], ti[b]) for a, b in pairs]


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# --------------------------------------------------------------------------
# delexicalization

NUMBER_WORDS = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                "eleven", "twelve", "fifteen", "twenty", "thirty", "forty", "fifty", "sixty",
                "hundred", "thousand"}
TIME_PERIODS = {"am", "pm", "a.m.", "p.m.", "a.m", "p.m"}
DURATION_UNITS = {"second", "seconds", "sec", "secs", "minute", "minutes", "min", "mins", "hour", "hours",
                  "hr", "hrs", "day", "days", "week", "weeks", "month", "months", "year", "years"}

# (pattern, placeholder), checked in order against a lower-cased token
DELEX_RULES = [
    (re.compile(r"^\d{1,2}:\d{2}(:\d{2})?(am|pm|a\.m\.|p\.m\.)?$"), "@time"),
    (re.compile(r"^\d{1,2}(am|pm|a\.m\.|p\.m\.)$"), "@time"),
    (re.compile(r"^\d+(\.\d+)?(s|sec|secs|min|mins|h|hr|hrs|d)$"), "@duration"),
    (re.compile(r"^[+-]?\d+([.,]\d+)*(st|nd|rd|th)?$"), "@number"),
]


def delexicalize_token(token: str) -> str:
    if token.startswith("@"):
        return token
    low = token.lower()
    for pattern, placeholder in DELEX_RULES:
        if pattern.match(low):
            return placeholder
    if low in NUMBER_WORDS:
        return "@number"
    if low in TIME_PERIODS:
        return "@time-period"
    if low in DURATION_UNITS:
        return "@duration"
    return token


def delexicalize(tokens) -> list[str]:
    """Replace number, time and duration tokens with placeholders, one for one."""
    return [delexicalize_token(t) for t in tokens]


def main(argv=None):
    p = argparse.ArgumentParser(description="refine a source embedding space toward a target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--seed-dict")
    p.add_argument("--pair", default="en-es")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--out")
    args = p.parse_args(argv)
    sw, X = read_embeddings(args.source)
    tw, Z = read_embeddings(args.target)
    X, Z = preprocess(X), preprocess(Z)
    pairs = read_seed_dictionary(args.seed_dict) if args.seed_dict else default_seed_dictionary(args.pair)
    res = refine(X, Z, seed_index_pairs(pairs, sw, tw), args.threshold, args.max_iters)
    print(f"iterations {res.iterations} converged {res.converged} distance {res.distances[-1]:.4f}")
    if args.out:
        write_embeddings(args.out, sw, X @ res.W)


if __name__ == "__main__":
    main()
