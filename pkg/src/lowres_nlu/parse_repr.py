"""Hierarchical intent/slot trees and the flattened label codec.

A :class:`ParseTree` is the MTOP-style bracketed parse of an utterance.  Spans
are 1-based and inclusive, so the root always covers ``(1, n)``.

The flattened form (:class:`FlatLabels`) has three parts:

* the coarse intent, which is the root label;
* one fine-intent BIO label per token.  An intent that sits inside another
  non-root intent gets a ``-NESTED`` suffix, and the enclosing intent's span
  extends implicitly over it;
* one slot stack per token, listing the BIO labels of all covering slots from
  the outermost to the innermost.

Flat labels spell types with hyphens (``SL:METHOD_MESSAGE`` becomes
``B-METHOD-MESSAGE``). Decoding maps hyphens back to underscores.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Union

MAX_FERTILITY = 3
NESTED_SUFFIX = "-NESTED"

_TYPE_RE = re.compile(r"^[A-Z0-9_]+$")
_FLAT_TYPE_RE = re.compile(r"^[A-Z0-9-]+$")


class ParseReprError(ValueError):
    """Base class for codec errors; carries the diagnostics that caused it."""

    def __init__(self, message: str, diagnostics: Iterable["Diagnostic"] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class UnbalancedBrackets(ParseReprError):
    pass


class TokenMismatch(ParseReprError):
    pass


class InvariantViolation(ParseReprError):
    pass


class FertilityOverflow(ParseReprError):
    pass


class NestedIntentConflict(ParseReprError):
    pass


class MalformedBIO(ParseReprError):
    pass


class UnnestableSpans(ParseReprError):
    pass


_ERROR_FOR_CODE = {
    "MalformedBIO": MalformedBIO,
    "NestedWithoutOuter": MalformedBIO,
    "UnnestableSpans": UnnestableSpans,
    "SlotWithoutIntent": UnnestableSpans,
    "FertilityOverflow": FertilityOverflow,
    "NestedIntentConflict": NestedIntentConflict,
}


@dataclass(frozen=True)
class Diagnostic:
    """One violated invariant. ``location`` is a 1-based token index (0 if global)."""

    code: str
    location: int
    message: str = ""

    def __str__(self) -> str:
        return f"{self.code}@{self.location}"


def _raise_for(diagnostics: list[Diagnostic], what: str) -> None:
    first = diagnostics[0]
    cls = _ERROR_FOR_CODE.get(first.code, InvariantViolation)
    detail = "; ".join(f"{d}: {d.message}" if d.message else str(d) for d in diagnostics)
    raise cls(f"{what}: {detail}", diagnostics)


@dataclass(frozen=True)
class SlotNode:
    label: str
    span: tuple[int, int]
    children: tuple["IntentNode", ...] = ()

    prefix = "SL"


@dataclass(frozen=True)
class IntentNode:
    label: str
    span: tuple[int, int]
    children: tuple[Union["IntentNode", SlotNode], ...] = ()

    prefix = "IN"


Node = Union[IntentNode, SlotNode]


@dataclass(frozen=True)
class ParseTree:
    tokens: tuple[str, ...]
    root: IntentNode

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __str__(self) -> str:
        return serialize(self)

    def nodes(self):
        """Yield ``(node, parent)`` pairs in pre-order, root first with parent None."""
        todo = [(self.root, None)]
        while todo:
            node, parent = todo.pop()
            yield node, parent
            todo.extend((child, node) for child in reversed(node.children))


@dataclass(frozen=True)
class FlatLabels:
    coarse_intent: str
    fine_intents: tuple[str, ...]
    slot_stacks: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "fine_intents", tuple(self.fine_intents))
        object.__setattr__(self, "slot_stacks", tuple(tuple(s) for s in self.slot_stacks))

    def __len__(self) -> int:
        return len(self.fine_intents)

    @property
    def fertility(self) -> list[int]:
        """Per-token fertility as used by the parser: empty stacks count as one O label."""
        return [max(1, len(stack)) for stack in self.slot_stacks]

    def flattened_slots(self) -> list[str]:
        out = []
        for stack in self.slot_stacks:
            out.extend(stack if stack else ("O",))
        return out

    def to_record(self, tokens=None) -> dict:
        record = {"coarse": self.coarse_intent, "fine": list(self.fine_intents),
                  "stacks": [list(s) for s in self.slot_stacks]}
        if tokens is not None:
            record = {"tokens": list(tokens), **record}
        return record

    @classmethod
    def from_record(cls, record: dict) -> "FlatLabels":
        return cls(record["coarse"], record["fine"], record["stacks"])


# --------------------------------------------------------------------------
# bracketed form

def parse_hierarchical(text: str, tokens=None, max_fertility: int = MAX_FERTILITY) -> ParseTree:
    """Parse ``[IN:X w [SL:Y w ] ]`` into a validated :class:`ParseTree`.

    ``tokens`` defaults to the leaves of ``text``; when given, the leaves must
    match it exactly and in order.
    """
    stack: list[list] = []
    leaves: list[str] = []
    root = None
    for piece in text.split():
        if piece.startswith("[IN:") or piece.startswith("[SL:"):
            if root is not None:
                raise UnbalancedBrackets(f"content after the root node closes: {piece!r}")
            stack.append([piece[1:3], piece[4:].upper(), len(leaves) + 1, []])
        elif piece == "]":
            if not stack:
                raise UnbalancedBrackets("closing bracket without an open node")
            kind, label, start, children = stack.pop()
            end = len(leaves)
            if end < start:
                raise InvariantViolation(f"node {kind}:{label} covers no tokens",
                                         [Diagnostic("EmptySpan", start)])
            cls = IntentNode if kind == "IN" else SlotNode
            node = cls(label, (start, end), tuple(children))
            if stack:
                stack[-1][3].append(node)
            else:
                root = node
        elif piece.startswith("["):
            raise InvariantViolation(f"unknown node marker {piece!r}", [Diagnostic("BadLabel", len(leaves) + 1)])
        else:
            if not stack:
                raise TokenMismatch(f"token {piece!r} outside the root node")
            leaves.append(piece)
    if stack:
        raise UnbalancedBrackets(f"{len(stack)} node(s) left open")
    if root is None:
        raise UnbalancedBrackets("no node found")
    if isinstance(root, SlotNode):
        raise InvariantViolation("root must be an intent", [Diagnostic("RootNotIntent", 1)])
    if tokens is not None and list(tokens) != leaves:
        raise TokenMismatch(f"leaves {leaves} do not match tokens {list(tokens)}")
    tree = ParseTree(tuple(leaves), root)
    diagnostics = validate(tree, max_fertility=max_fertility)
    if diagnostics:
        _raise_for(diagnostics, "invalid parse")
    return tree


def serialize(tree: ParseTree) -> str:
    """Canonical bracketed form: single spaces, ``IN:``/``SL:`` prefixes."""
    tokens = tree.tokens
    out: list[str] = []

    def emit(node):
        out.append(f"[{node.prefix}:{node.label}")
        pos = node.span[0]
        for child in node.children:
            out.extend(tokens[pos - 1:child.span[0] - 1])
            emit(child)
            pos = child.span[1] + 1
        out.extend(tokens[pos - 1:node.span[1]])
        out.append("]")

    emit(tree.root)
    return " ".join(out)


# --------------------------------------------------------------------------
# validation

def validate(obj, max_fertility: int = MAX_FERTILITY) -> list[Diagnostic]:
    """Return the violated invariants of a ParseTree or FlatLabels (empty if valid)."""
    if isinstance(obj, ParseTree):
        return _validate_tree(obj, max_fertility)
    if isinstance(obj, FlatLabels):
        return _reconstruct(obj, len(obj), repair=False, max_fertility=max_fertility)[2]
    raise TypeError(f"cannot validate {type(obj).__name__}")


def _validate_tree(tree: ParseTree, max_fertility) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    n = len(tree.tokens)
    if n == 0:
        return [Diagnostic("EmptyUtterance", 0)]
    if tree.root.span != (1, n):
        diags.append(Diagnostic("RootSpan", 1, f"root covers {tree.root.span}, expected (1, {n})"))
    depth_per_token = [0] * (n + 2)

    def check(node, parent, slot_depth):
        s, e = node.span
        if not _TYPE_RE.match(node.label) or node.label.endswith("_NESTED"):
            diags.append(Diagnostic("BadLabel", s, node.label))
        if not (1 <= s <= e <= n):
            diags.append(Diagnostic("BadSpan", max(s, 0), f"{node.span}"))
            return
        if parent is not None:
            ps, pe = parent.span
            if s < ps or e > pe:
                diags.append(Diagnostic("SpanOutsideParent", s, f"{node.span} not in {parent.span}"))
            if isinstance(parent, SlotNode) and isinstance(node, SlotNode):
                diags.append(Diagnostic("SlotInSlot", s, "slot children must be intents"))
            if (isinstance(parent, IntentNode) and parent is not tree.root
                    and isinstance(node, SlotNode) and node.span == parent.span):
                diags.append(Diagnostic("SlotIntentOrder", s,
                                        "a slot and an intent sharing a span must nest intent-inside-slot"))
        if isinstance(node, SlotNode):
            slot_depth += 1
            for i in range(s, e + 1):
                depth_per_token[i] = max(depth_per_token[i], slot_depth)
        children = node.children
        for a, b in zip(children, children[1:]):
            if b.span[0] <= a.span[1] and a.span[0] <= b.span[1]:
                diags.append(Diagnostic("SiblingOverlap", max(a.span[0], b.span[0])))
            elif b.span[0] < a.span[0]:
                diags.append(Diagnostic("SiblingOrder", b.span[0]))
        for child in children:
            check(child, node, slot_depth)

    check(tree.root, None, 0)
    if max_fertility is not None:
        for i in range(1, n + 1):
            if depth_per_token[i] > max_fertility:
                diags.append(Diagnostic("FertilityOverflow", i,
                                        f"{depth_per_token[i]} slots > {max_fertility}"))
    return diags


# --------------------------------------------------------------------------
# label helpers

def flat_type(label: str) -> str:
    return label.replace("_", "-")


def tree_type(flat_label_type: str) -> str:
    return flat_label_type.replace("-", "_")


def fine_label(prefix: str, label: str, nested: bool) -> str:
    return f"{prefix}-{flat_type(label)}{NESTED_SUFFIX if nested else ''}"


def split_bio(label: str) -> tuple[str, str]:
    """``'B-TODO'`` -> ``('B', 'TODO')``; ``'O'`` -> ``('O', '')``."""
    if label == "O":
        return "O", ""
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        return label[0], label[2:]
    raise ValueError(f"not a BIO label: {label!r}")


def split_fine(label: str) -> tuple[str, str, bool]:
    prefix, typ = split_bio(label)
    nested = typ.endswith(NESTED_SUFFIX)
    if nested:
        typ = typ[: -len(NESTED_SUFFIX)]
    return prefix, typ, nested


# --------------------------------------------------------------------------
# encoding

def encode_flat(tree: ParseTree, max_fertility: int = MAX_FERTILITY) -> FlatLabels:
    """Decompose a tree into coarse intent, fine-intent labels and slot stacks."""
    diags = _validate_tree(tree, max_fertility)
    if diags:
        _raise_for(diags, "cannot encode invalid tree")
    n = len(tree.tokens)
    fine = ["O"] * n
    stacks: list[list[str]] = [[] for _ in range(n)]
    intents: list[tuple[str, int, int]] = []

    def walk(node, inside_intent):
        for child in node.children:
            s, e = child.span
            if isinstance(child, SlotNode):
                for i in range(s, e + 1):
                    stacks[i - 1].append(f"{'B' if i == s else 'I'}-{flat_type(child.label)}")
                walk(child, inside_intent)
            else:
                intents.append((child.label, s, e))
                for i in range(s, e + 1):
                    fine[i - 1] = fine_label("B" if i == s else "I", child.label, inside_intent)
                walk(child, True)

    walk(tree.root, False)

    starts: dict[int, str] = {}
    for label, s, _ in intents:
        if s in starts:
            raise NestedIntentConflict(
                f"intents {starts[s]} and {label} both start at token {s}",
                [Diagnostic("NestedIntentConflict", s)])
        starts[s] = label
    read_diags: list[Diagnostic] = []
    read = {(tree_type(t), s, e) for t, s, e, _ in _read_fine(fine, read_diags, repair=False)}
    if read_diags or read != set(intents):
        where = min((s for _, s, _ in set(intents) ^ read), default=1)
        raise NestedIntentConflict(
            "nested intents cannot be recovered unambiguously from one label per token",
            [Diagnostic("NestedIntentConflict", where, "adjacent nested intents")])
    return FlatLabels(tree.root.label, fine, stacks)


# --------------------------------------------------------------------------
# decoding

class _Span:
    __slots__ = ("kind", "label", "start", "end", "depth", "nested", "children")

    def __init__(self, kind, label, start, end, depth=0, nested=False):
        self.kind, self.label, self.start, self.end = kind, label, start, end
        self.depth, self.nested = depth, nested
        self.children: list[_Span] = []

    def freeze(self):
        children = tuple(c.freeze() for c in self.children)
        cls = IntentNode if self.kind == "IN" else SlotNode
        return cls(self.label, (self.start, self.end), children)


def _read_fine(fine, diags, repair) -> list[tuple[str, int, int, bool]]:
    """Recover fine-intent spans from one label per token.

    A ``-NESTED`` label opens a child of the innermost open intent, extending
    every open intent over it; ``I-X`` continues the innermost open intent of
    type X and closes those opened after it.
    """
    spans: list[_Span] = []
    open_: list[_Span] = []
    for i, label in enumerate(fine, 1):
        if label == "O":
            open_.clear()
            continue
        try:
            prefix, typ, nested = split_fine(label)
        except ValueError:
            diags.append(Diagnostic("BadLabel", i, label))
            open_.clear()
            continue
        if not _FLAT_TYPE_RE.match(typ):
            diags.append(Diagnostic("BadLabel", i, label))
        if prefix == "I":
            match = next((j for j in range(len(open_) - 1, -1, -1)
                          if open_[j].label == typ and open_[j].nested == nested), None)
            if match is not None:
                del open_[match + 1:]
                for span in open_:
                    span.end = i
                continue
            diags.append(Diagnostic("MalformedBIO", i, f"{label} continues nothing"))
        if nested and not open_:
            diags.append(Diagnostic("NestedWithoutOuter", i, f"{label} has no enclosing intent"))
            nested = False
        if nested:
            for span in open_:
                span.end = i
        else:
            open_.clear()
        new = _Span("IN", typ, i, i, nested=nested)
        open_.append(new)
        spans.append(new)
    return [(s.label, s.start, s.end, s.nested) for s in spans]


def _read_slots(stacks, n, diags, max_fertility) -> list[_Span]:
    depth = max((len(s) for s in stacks), default=0)
    by_level: list[list[_Span]] = []
    for i, stack in enumerate(stacks, 1):
        if max_fertility is not None and len(stack) > max_fertility:
            diags.append(Diagnostic("FertilityOverflow", i, f"{len(stack)} > {max_fertility}"))
    for level in range(depth):
        spans: list[_Span] = []
        current = None
        for i in range(1, n + 1):
            stack = stacks[i - 1]
            if level >= len(stack):
                current = None
                continue
            try:
                prefix, typ = split_bio(stack[level])
            except ValueError:
                diags.append(Diagnostic("BadLabel", i, stack[level]))
                current = None
                continue
            if prefix == "O" or not _FLAT_TYPE_RE.match(typ):
                diags.append(Diagnostic("BadLabel", i, stack[level]))
                current = None
                continue
            if prefix == "I":
                if current is not None and current.label == typ and current.end == i - 1:
                    current.end = i
                    continue
                diags.append(Diagnostic("MalformedBIO", i, f"{stack[level]} at depth {level + 1} continues nothing"))
            current = _Span("SL", typ, i, i, depth=level + 1)
            spans.append(current)
        by_level.append(spans)
    # a deeper span must sit inside one span of the level above
    for level in range(1, len(by_level)):
        outer = by_level[level - 1]
        for span in by_level[level]:
            parent = next((o for o in outer if o.start <= span.start <= o.end), None)
            if parent is not None and span.end > parent.end:
                diags.append(Diagnostic("UnnestableSpans", parent.end + 1,
                                        f"depth-{level + 1} span {span.start}-{span.end} overhangs "
                                        f"{parent.start}-{parent.end}"))
                span.end = parent.end
    return [s for level in by_level for s in level]


def _reconstruct(flat: FlatLabels, n: int, repair: bool, max_fertility=MAX_FERTILITY):
    """Shared decoder. Returns ``(root span tree, repairs, diagnostics)``."""
    diags: list[Diagnostic] = []
    if len(flat.fine_intents) != n or len(flat.slot_stacks) != n:
        diags.append(Diagnostic("LengthMismatch", 0,
                                f"{len(flat.fine_intents)} fine / {len(flat.slot_stacks)} stacks / {n} tokens"))
        return None, [], diags
    if n == 0:
        return None, [], [Diagnostic("EmptyUtterance", 0)]
    if not _TYPE_RE.match(tree_type(flat.coarse_intent)):
        diags.append(Diagnostic("BadLabel", 0, flat.coarse_intent))

    slots = _read_slots(flat.slot_stacks, n, diags, max_fertility)
    intents = [_Span("IN", typ, s, e, nested=nested)
               for typ, s, e, nested in _read_fine(flat.fine_intents, diags, repair)]

    slot_depths: dict[tuple[int, int], int] = {}
    for span in slots:
        key = (span.start, span.end)
        slot_depths[key] = min(slot_depths.get(key, span.depth), span.depth)

    def rank(span):
        if span.kind == "SL":
            return 2 * span.depth
        shallowest = slot_depths.get((span.start, span.end))
        return 1 if shallowest is None else 2 * shallowest + 1

    root = _Span("IN", tree_type(flat.coarse_intent), 1, n)
    stack = [root]
    for span in sorted(slots + intents, key=lambda s: (s.start, -s.end, rank(s))):
        while True:
            top = stack[-1]
            if span.start > top.end:
                stack.pop()
                continue
            if span.end > top.end:
                diags.append(Diagnostic("UnnestableSpans", top.end + 1,
                                        f"{span.kind}:{span.label} {span.start}-{span.end} crosses "
                                        f"{top.kind}:{top.label} {top.start}-{top.end}"))
                span.end = top.end
            break
        parent = stack[-1]
        if span.kind == "SL" and parent.kind == "SL":
            diags.append(Diagnostic("SlotWithoutIntent", span.start,
                                    f"slot {span.label} directly inside slot {parent.label}"))
            continue
        span.label = tree_type(span.label)
        parent.children.append(span)
        stack.append(span)
    repairs = [d for d in diags if d.code in ("MalformedBIO", "NestedWithoutOuter",
                                              "UnnestableSpans", "SlotWithoutIntent")]
    return root, repairs, diags


def decode_flat_verbose(flat: FlatLabels, tokens, repair: bool = False,
                        max_fertility: int = MAX_FERTILITY) -> tuple[ParseTree, list[Diagnostic]]:
    """Like :func:`decode_flat` but also returns the repairs that were applied.

    Without ``repair`` any diagnostic raises. With ``repair``, orphan ``I-``
    labels become ``B-``, overhanging spans are clipped to their parent, and
    slots with no intent between them and an enclosing slot are dropped.
    Label-format and length errors still raise.
    """
    tokens = tuple(tokens)
    root, repairs, diags = _reconstruct(flat, len(tokens), repair, None if repair else max_fertility)
    fatal = [d for d in diags if d not in repairs] if repair else diags
    if fatal:
        _raise_for(fatal, "cannot decode flat labels")
    return ParseTree(tokens, root.freeze()), repairs


def decode_flat(flat: FlatLabels, tokens, repair: bool = False,
                max_fertility: int = MAX_FERTILITY) -> ParseTree:
    """Rebuild the unique tree whose encoding is ``flat``."""
    return decode_flat_verbose(flat, tokens, repair, max_fertility)[0]


# --------------------------------------------------------------------------
# small queries used by the harness

def is_nested(tree_or_flat) -> bool:
    """True if the utterance has any fine-grained intent or a token under two or more slots."""
    flat = tree_or_flat if isinstance(tree_or_flat, FlatLabels) else encode_flat(tree_or_flat, max_fertility=None)
    return any(label != "O" for label in flat.fine_intents) or any(len(s) > 1 for s in flat.slot_stacks)


def labels_equal(a: FlatLabels, b: FlatLabels) -> bool:
    """Field-wise equality, case-insensitive on label strings."""
    def norm(flat):
        return (flat.coarse_intent.upper(), tuple(x.upper() for x in flat.fine_intents),
                tuple(tuple(x.upper() for x in s) for s in flat.slot_stacks))
    return norm(a) == norm(b)
