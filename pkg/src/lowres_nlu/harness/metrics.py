"""Span F1, exact match and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from ..bio import spans_from_bio
from ..parse_repr import FlatLabels, ParseTree, encode_flat, is_nested, labels_equal


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return 100 * p, 100 * r, 100 * f


def bio_f1(gold, pred) -> tuple[float, float, float]:
    """Corpus-level span precision, recall and F1 (x100).

    ``gold`` and ``pred`` are lists of label sequences. A predicted span counts
    only if its boundaries and type both match. Empty denominators give 0.
    """
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sequences vs {len(pred)} predicted")
    tp = n_gold = n_pred = 0
    for k, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError(f"sequence {k}: {len(g)} gold labels vs {len(p)} predicted")
        gs, ps = set(spans_from_bio(g)), set(spans_from_bio(p))
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    return _prf(tp, n_pred, n_gold)


def _flat(x) -> FlatLabels | None:
    if isinstance(x, FlatLabels):
        return x
    try:
        return encode_flat(x, max_fertility=None)
    except ValueError:
        return None


def exact_match(gold, pred) -> int:
    """1 iff coarse intent, fine-intent labels and every slot stack agree (case-insensitive)."""
    g, p = _flat(gold), _flat(pred)
    if g is None or p is None or len(g) != len(p):
        return 0
    return int(labels_equal(g, p))


def exact_match_accuracy(golds, preds) -> float:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold parses vs {len(preds)} predicted")
    if not golds:
        return 0.0
    return 100 * sum(exact_match(g, p) for g, p in zip(golds, preds)) / len(golds)


def nested_split(dataset, key=lambda x: x):
    """``(nested, non_nested)``; an item is non-nested without fine intents or stacked slots."""
    nested, flat = [], []
    for item in dataset:
        (nested if is_nested(key(item)) else flat).append(item)
    return nested, flat


@dataclass
class EvalReport:
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    exact_match: float | None = None
    exact_match_nested: float | None = None
    exact_match_non_nested: float | None = None
    counts: dict = field(default_factory=dict)
    repairs: int = 0
    latency: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = []
        for name in ("precision", "recall", "f1", "exact_match", "exact_match_nested", "exact_match_non_nested"):
            value = getattr(self, name)
            if value is not None:
                rows.append(f"{name:<24}{value:8.2f}")
        for name, value in sorted(self.counts.items()):
            rows.append(f"{name:<24}{value:8d}")
        if self.repairs:
            rows.append(f"{'repairs':<24}{self.repairs:8d}")
        for row in self.latency:
            rows.append(f"len {row['length']:<4} median {row['median_ms']:.3f} ms  decoder calls {row['decoder_calls']}")
        return "\n".join(rows)


def evaluate_parses(golds: list[ParseTree], preds: list[ParseTree], repairs: int = 0) -> EvalReport:
    pairs = list(zip(golds, preds))
    nested = [(g, p) for g, p in pairs if is_nested(g)]
    flat = [(g, p) for g, p in pairs if not is_nested(g)]

    def em(ps):
        return exact_match_accuracy([g for g, _ in ps], [p for _, p in ps]) if ps else None

    return EvalReport(exact_match=exact_match_accuracy(golds, preds), exact_match_nested=em(nested),
                      exact_match_non_nested=em(flat),
                      counts={"total": len(pairs), "nested": len(nested), "non_nested": len(flat)},
                      repairs=repairs)


def evaluate_tags(gold, pred) -> EvalReport:
    p, r, f = bio_f1(gold, pred)
    return EvalReport(precision=p, recall=r, f1=f, counts={"sentences": len(gold)})
