"""Plain BIO helpers shared by the taggers and the scorer."""
from __future__ import annotations

import re

_LABEL_RE = re.compile(r"^(O|[BI]-\S+)$")


def is_bio_label(label: str) -> bool:
    return bool(_LABEL_RE.match(label))


def spans_from_bio(labels) -> list[tuple[int, int, str]]:
    """``(start, end, type)`` with 0-based inclusive ends.

    A span ends at ``O``, at ``B-``, or at an ``I-`` of another type; an ``I-``
    that does not continue a span opens one (the usual conlleval reading).
    """
    spans, cur = [], None
    for i, lab in enumerate(list(labels) + ["O"]):
        tag, typ = (lab, "") if lab == "O" else (lab[0], lab[2:])
        if cur is not None and (tag != "I" or typ != cur[2]):
            spans.append((cur[0], i - 1, cur[2]))
            cur = None
        if tag == "B" or (tag == "I" and cur is None):
            cur = (i, i, typ)
    return spans


def labels_from_spans(n: int, spans) -> list[str]:
    labels = ["O"] * n
    for s, e, typ in spans:
        labels[s] = f"B-{typ}"
        for i in range(s + 1, e + 1):
            labels[i] = f"I-{typ}"
    return labels
