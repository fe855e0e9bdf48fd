"""Seeded generators for random parse trees and small toy corpora.

These feed the round-trip property tests and the end-to-end toy experiments.
Nothing here is tuned to a real dataset.
"""
from __future__ import annotations

import argparse
import json
import os

import numpy as np

from .parse_repr import (MAX_FERTILITY, IntentNode, ParseReprError, ParseTree, SlotNode,
                         encode_flat, serialize)

INTENT_TYPES = ("CREATE_CALL", "GET_CONTACT", "SEND_MESSAGE", "GET_WEATHER",
                "CREATE_REMINDER", "SET_ALARM", "GET_EVENT")
SLOT_TYPES = ("TODO", "METHOD_MESSAGE", "CONTACT", "DATE_TIME", "LOCATION",
              "RECIPIENT", "CONTENT_EXACT", "GROUP")


def random_tree(rng: np.random.Generator, max_len: int = 12, max_depth: int = 4,
                max_fertility: int = MAX_FERTILITY, vocab_size: int = 30,
                intents=INTENT_TYPES, slots=SLOT_TYPES, max_tries: int = 1000) -> ParseTree:
    """Draw a random canonical tree that the flat codec accepts.

    ``max_depth`` bounds the number of intents on any root-to-leaf path (the
    root counts as one); ``max_fertility`` bounds the slots covering a token.
    Trees whose nested intents would be ambiguous under one intent label per
    token are redrawn.
    """
    for _ in range(max_tries):
        n = int(rng.integers(1, max_len + 1))
        tokens = tuple(f"w{int(t)}" for t in rng.integers(0, vocab_size, size=n))
        root = IntentNode(str(rng.choice(intents)), (1, n),
                          _intent_children(rng, 1, n, True, 1, 0, max_depth, max_fertility, intents, slots))
        tree = ParseTree(tokens, root)
        try:
            encode_flat(tree, max_fertility=max_fertility)
        except ParseReprError:
            continue
        return tree
    raise RuntimeError("could not draw an encodable tree")


def _intent_children(rng, s, e, is_root, depth, slot_depth, max_depth, max_fert, intents, slots):
    children = []
    # a non-root intent keeps its first token, so nothing nested inside starts with it
    pos = s if is_root else s + 1
    while pos <= e:
        can_slot = slot_depth < max_fert
        can_intent = depth < max_depth
        if not (can_slot or can_intent) or rng.random() < 0.35:
            pos += 1
            continue
        length = int(rng.integers(1, e - pos + 2))
        end = pos + length - 1
        if can_slot and (not can_intent or rng.random() < 0.75):
            kids = _slot_children(rng, pos, end, depth, slot_depth + 1, max_depth, max_fert, intents, slots)
            children.append(SlotNode(str(rng.choice(slots)), (pos, end), kids))
        else:
            kids = _intent_children(rng, pos, end, False, depth + 1, slot_depth, max_depth, max_fert, intents, slots)
            children.append(IntentNode(str(rng.choice(intents)), (pos, end), kids))
        pos = end + 1
    return tuple(children)


def _slot_children(rng, s, e, depth, slot_depth, max_depth, max_fert, intents, slots):
    if depth >= max_depth or rng.random() < 0.25:
        return ()
    a = int(rng.integers(s, e + 1))
    b = int(rng.integers(a, e + 1))
    kids = _intent_children(rng, a, b, False, depth + 1, slot_depth, max_depth, max_fert, intents, slots)
    return (IntentNode(str(rng.choice(intents)), (a, b), kids),)


# --------------------------------------------------------------------------
# toy compositional grammar for the parser experiments

class ToyGrammar:
    """A small task-oriented grammar with intents nested inside slots.

    Vocabulary: 4 intents with 2 trigger words each, 8 slot types with 3 value
    words each, plus filler words up to ``vocab_size``.
    """

    intents = ("ALARM", "CALL", "MESSAGE", "WEATHER")
    slots = ("TIME", "PERSON", "PLACE", "TOPIC", "DATE", "GROUP", "METHOD", "APP")

    def __init__(self, vocab_size: int = 50, max_depth: int = 3):
        words = [f"t{i}" for i in range(8)] + [f"v{i}" for i in range(24)]
        words += [f"f{i}" for i in range(vocab_size - len(words))]
        self.vocab = words[:vocab_size]
        self.triggers = {intent: (f"t{2 * k}", f"t{2 * k + 1}") for k, intent in enumerate(self.intents)}
        self.values = {slot: tuple(f"v{3 * k + j}" for j in range(3)) for k, slot in enumerate(self.slots)}
        self.fillers = [w for w in self.vocab if w.startswith("f")]
        self.max_depth = max_depth
        # which slot types can host a nested intent, and which intent
        self.hosts = {"TOPIC": "MESSAGE", "PERSON": "CALL", "DATE": "WEATHER"}

    def sample(self, rng: np.random.Generator) -> ParseTree:
        tokens: list[str] = []
        root_intent = str(rng.choice(self.intents))
        root = self._intent(rng, root_intent, tokens, depth=0, is_root=True)
        return ParseTree(tuple(tokens), root)

    def _intent(self, rng, intent, tokens, depth, is_root):
        start = len(tokens) + 1
        if is_root and rng.random() < 0.3:
            tokens.append(str(rng.choice(self.fillers)))
        tokens.append(str(rng.choice(self.triggers[intent])))
        children = []
        n_slots = int(rng.integers(0, 3 if depth == 0 else 2))
        for slot in rng.choice(self.slots, size=n_slots, replace=False):
            slot = str(slot)
            if rng.random() < 0.3:
                tokens.append(str(rng.choice(self.fillers)))
            s = len(tokens) + 1
            host = self.hosts.get(slot)
            if host and depth + 2 <= self.max_depth - 1 and rng.random() < 0.5:
                child = self._intent(rng, host, tokens, depth + 2, is_root=False)
                children.append(SlotNode(slot, (s, len(tokens)), (child,)))
            else:
                for _ in range(int(rng.integers(1, 3))):
                    tokens.append(str(rng.choice(self.values[slot])))
                children.append(SlotNode(slot, (s, len(tokens))))
        return IntentNode(intent, (start, len(tokens)), tuple(children))

    def dataset(self, size: int, seed: int) -> list[ParseTree]:
        rng = np.random.default_rng(seed)
        out = []
        while len(out) < size:
            tree = self.sample(rng)
            try:
                encode_flat(tree)
            except ParseReprError:
                continue
            out.append(tree)
        return out


# --------------------------------------------------------------------------
# toy cross-domain slot filling world

class ToySlotWorld:
    """Synthetic domains for coarse-to-fine slot filling.

    Every slot type owns a concept direction in a fixed embedding space. Its
    value words and its description words sit close to that direction, so a
    type never seen in training can still be matched through its description.
    """

    def __init__(self, dim: int = 32, seed: int = 0, values_per_type: int = 6, noise: float = 0.35):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.domains = {
            "music": ("ARTIST", "PLAYLIST", "GENRE", "SERVICE", "FORMAT"),
            "travel": ("CITY", "DATE", "AIRLINE", "MEAL", "RESTAURANT"),
            "food": ("CITY", "DATE", "MEAL", "CUISINE"),
        }
        self.unseen = "CUISINE"
        types = sorted({t for ts in self.domains.values() for t in ts})
        # every description word of the unseen type is used by two seen types
        desc_words = {
            "ARTIST": "person name", "PLAYLIST": "music list", "GENRE": "music style",
            "SERVICE": "app name", "FORMAT": "file style", "CITY": "place name", "DATE": "day time",
            "AIRLINE": "company name", "MEAL": "food item", "RESTAURANT": "food place",
            "CUISINE": "food style",
        }
        self.descriptions = {t: desc_words[t].split() for t in types}
        basis = {}
        for word in sorted({w for d in self.descriptions.values() for w in d}):
            v = rng.normal(size=dim)
            basis[word] = v / np.linalg.norm(v)
        self.table: dict[str, np.ndarray] = dict(basis)
        # all value words share an "entity" component so spans of unseen types are detectable
        entity = rng.normal(size=dim)
        entity /= np.linalg.norm(entity)
        self.values: dict[str, list[str]] = {}
        for t in types:
            centre = sum(basis[w] for w in self.descriptions[t])
            centre = centre / np.linalg.norm(centre)
            words = [f"{t.lower()}{j}" for j in range(values_per_type)]
            for w in words:
                v = centre + 0.8 * entity + noise * rng.normal(size=dim) / np.sqrt(dim)
                self.table[w] = v / np.linalg.norm(v)
            self.values[t] = words
        self.context = [f"ctx{k}" for k in range(4)]
        self.fillers = [f"fill{k}" for k in range(12)]
        for w in self.context + self.fillers:
            v = rng.normal(size=dim)
            self.table[w] = v / np.linalg.norm(v)

    def sentence(self, rng, domain):
        """Return ``(tokens, bio labels)`` for one utterance of ``domain``."""
        tokens, labels = [], []
        types = self.domains[domain]
        for t in rng.choice(types, size=int(rng.integers(1, 3)), replace=False):
            t = str(t)
            for _ in range(int(rng.integers(0, 2))):
                tokens.append(str(rng.choice(self.fillers)))
                labels.append("O")
            tokens.append(str(rng.choice(self.context)))
            labels.append("O")
            for j in range(int(rng.integers(1, 3))):
                tokens.append(str(rng.choice(self.values[t])))
                labels.append(("B-" if j == 0 else "I-") + t)
        if rng.random() < 0.5:
            tokens.append(str(rng.choice(self.fillers)))
            labels.append("O")
        return tokens, labels

    def corpus(self, domain, size, seed):
        rng = np.random.default_rng(seed)
        return [self.sentence(rng, domain) for _ in range(size)]


def main(argv=None):
    parser = argparse.ArgumentParser(description="write toy parse data as JSONL")
    parser.add_argument("--out", required=True)
    parser.add_argument("--size", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    trees = ToyGrammar().dataset(args.size, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        for tree in trees:
            f.write(json.dumps({"tokens": list(tree.tokens), "parse": serialize(tree)}, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
