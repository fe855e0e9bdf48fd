"""Dataset readers and writers.

Formats: CoNLL (``token<TAB>label``, blank line between sentences, optional
``# key = value`` metadata lines), parse JSONL (``{"parse": ...}`` or flat
records), two-column dictionary TSV, and one-sentence-per-line corpora.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..bio import is_bio_label
from ..parse_repr import FlatLabels, ParseReprError, ParseTree, decode_flat, encode_flat, parse_hierarchical, serialize

FORMATS = ("conll", "parse-jsonl", "dict-tsv", "corpus-lines")


class FormatError(ValueError):
    def __init__(self, path, line: int, column: int, message: str):
        self.path, self.line, self.column = str(path), line, column
        super().__init__(f"{path}:{line}:{column}: {message}")


@dataclass
class TaggedSequence:
    tokens: list
    labels: list
    intent: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens vs {len(self.labels)} labels")


def load_conll(path) -> list[TaggedSequence]:
    out: list[TaggedSequence] = []
    tokens, labels, meta = [], [], {}

    def flush():
        nonlocal tokens, labels, meta
        if tokens:
            out.append(TaggedSequence(tokens, labels, meta.get("intent"), meta))
        elif meta:
            raise FormatError(path, lineno, 1, "metadata without a sentence")
        tokens, labels, meta = [], [], {}

    lineno = 0
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            if line.startswith("#") and not tokens:
                body = line[1:].strip()
                if "=" not in body:
                    raise FormatError(path, lineno, 1, "metadata must be '# key = value'")
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise FormatError(path, lineno, 1, "expected 'token<TAB>label'")
            if not is_bio_label(parts[1]):
                raise FormatError(path, lineno, len(parts[0]) + 2, f"bad BIO label {parts[1]!r}")
            tokens.append(parts[0])
            labels.append(parts[1])
    flush()
    return out


def write_conll(path, sequences) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, seq in enumerate(sequences):
            if k:
                f.write("\n")
            for key, value in getattr(seq, "meta", {}).items():
                f.write(f"# {key} = {value}\n")
            tokens, labels = (seq.tokens, seq.labels) if hasattr(seq, "tokens") else seq
            for t, l in zip(tokens, labels):
                f.write(f"{t}\t{l}\n")


def record_to_tree(record: dict) -> ParseTree:
    if "parse" in record:
        return parse_hierarchical(record["parse"], record.get("tokens"))
    if {"coarse", "fine", "stacks", "tokens"} <= set(record):
        return decode_flat(FlatLabels.from_record(record), record["tokens"])
    raise ValueError("record needs 'parse' or 'tokens' + 'coarse' + 'fine' + 'stacks'")


def load_parse_jsonl(path) -> list[ParseTree]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise FormatError(path, lineno, err.colno, f"invalid JSON: {err.msg}") from err
            try:
                out.append(record_to_tree(record))
            except (ParseReprError, ValueError, KeyError, TypeError) as err:
                raise FormatError(path, lineno, 1, str(err)) from err
    return out


def load_parse_records(path) -> list[dict]:
    """Raw JSON records (validated as JSON only)."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise FormatError(path, lineno, err.colno, f"invalid JSON: {err.msg}") from err
    return out


def tree_record(tree: ParseTree, flat: bool = False) -> dict:
    if flat:
        return encode_flat(tree, max_fertility=None).to_record(tree.tokens)
    return {"tokens": list(tree.tokens), "parse": serialize(tree)}


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def load_dict_tsv(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise FormatError(path, lineno, 1, "expected two non-empty tab-separated columns")
            out.append((parts[0], parts[1]))
    return out


def load_corpus_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def load(fmt: str, path):
    loaders = {"conll": load_conll, "parse-jsonl": load_parse_jsonl, "dict-tsv": load_dict_tsv,
               "corpus-lines": load_corpus_lines}
    if fmt not in loaders:
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    return loaders[fmt](path)
