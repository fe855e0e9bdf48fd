"""Fertility-based non-autoregressive compositional parser.

The utterance encoder produces one state per token plus a summary state
(a prepended ``[CLS]`` position). From those we predict the coarse intent,
one fine-intent label per token, and each token's fertility (how many slot
labels it carries). Token states are copied ``fertility`` times, passed once
through a slot encoder, and classified into the flattened slot sequence,
which is regrouped into per-token stacks and decoded into a tree.
"""
from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoders import OrtConfig, TransformerEncoder
from .parse_repr import (MAX_FERTILITY, Diagnostic, FlatLabels, ParseReprError, ParseTree, IntentNode,
                         decode_flat_verbose, encode_flat, parse_hierarchical)
from .tagger import Vocab, pad_batch

CLS = "[CLS]"


@dataclass
class X2Config:
    d_model: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_ff: int = 128
    slot_layers: int = 1
    slot_heads: int = 4
    slot_hidden: int = 400
    slot_ff: int = 64
    max_fertility: int = MAX_FERTILITY
    copy_rank_embedding: bool = True
    dropout: float = 0.0
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    @classmethod
    def from_dict(cls, values: dict) -> "X2Config":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown parser config keys: {sorted(unknown)}")
        kw = dict(values)
        if "loss_weights" in kw and isinstance(kw["loss_weights"], str):
            kw["loss_weights"] = tuple(float(x) for x in kw["loss_weights"].split(","))
        for name, f in cls.__dataclass_fields__.items():
            if name in kw and f.type in ("int", "float", "bool") and isinstance(kw[name], str):
                kw[name] = {"int": int, "float": float,
                            "bool": lambda s: s.lower() in ("1", "true", "yes")}[f.type](kw[name])
        return cls(**kw)


@dataclass
class X2Labels:
    """Label inventories for the four heads."""

    coarse: Vocab
    fine: Vocab
    slots: Vocab

    @classmethod
    def build(cls, flats):
        flats = list(flats)
        coarse = Vocab.build([[f.coarse_intent] for f in flats], specials=())
        fine = Vocab.build([f.fine_intents for f in flats], specials=("O",))
        slots = Vocab.build([f.flattened_slots() for f in flats], specials=("O",))
        return cls(coarse, fine, slots)

    def to_dict(self):
        return {"coarse": self.coarse.itos, "fine": self.fine.itos, "slots": self.slots.itos}

    @classmethod
    def from_dict(cls, d):
        return cls(Vocab(d["coarse"], ()), Vocab(d["fine"], ()), Vocab(d["slots"], ()))


@dataclass
class X2Example:
    tokens: list
    flat: FlatLabels

    @property
    def fertility(self) -> list[int]:
        return self.flat.fertility

    @classmethod
    def from_tree(cls, tree: ParseTree, max_fertility: int = MAX_FERTILITY):
        return cls(list(tree.tokens), encode_flat(tree, max_fertility=max_fertility))


def copy_hiddens(H: torch.Tensor, fertility) -> torch.Tensor:
    """Repeat row i of ``H`` (shape ``(n, d)``) ``fertility[i]`` times, in order."""
    f = torch.as_tensor(fertility, dtype=torch.long, device=H.device)
    if f.dim() != 1 or f.shape[0] != H.shape[0]:
        raise ValueError(f"need one fertility per row: {tuple(f.shape)} vs {H.shape[0]} rows")
    if (f < 1).any():
        raise ValueError("fertility must be positive")
    return H.repeat_interleave(f, dim=0)


def copy_ranks(fertility) -> list[int]:
    """Position of every expanded row inside its block: [2, 1] -> [0, 1, 0]."""
    return [r for f in fertility for r in range(int(f))]


def regroup(labels, fertility) -> list[tuple[str, ...]]:
    """Split a flattened slot sequence back into per-token stacks.

    ``O`` entries are dropped, so a block of only ``O`` becomes an empty stack.
    """
    if len(labels) != sum(fertility):
        raise ValueError(f"{len(labels)} slot labels for total fertility {sum(fertility)}")
    stacks, pos = [], 0
    for f in fertility:
        block = labels[pos:pos + f]
        pos += f
        stacks.append(tuple(x for x in block if x != "O"))
    return stacks


def first_subword_states(states: torch.Tensor, word_starts) -> torch.Tensor:
    """Pick the state of each word's first subword; ``word_starts`` are subword indices."""
    idx = torch.as_tensor(word_starts, dtype=torch.long, device=states.device)
    return states.index_select(-2, idx)


class X2Parser(nn.Module):
    def __init__(self, vocab: Vocab, labels: X2Labels, cfg: X2Config | None = None):
        super().__init__()
        self.cfg = cfg = cfg or X2Config()
        self.vocab, self.labels = vocab, labels
        d = cfg.d_model
        self.embed = nn.Embedding(len(vocab), d, padding_idx=0)
        self.cls = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = TransformerEncoder(OrtConfig(
            layers=cfg.encoder_layers, heads=cfg.encoder_heads, hidden_dim=d, positional_mode="sinusoid",
            feed_forward="linear", ff_dim=cfg.encoder_ff, dropout=cfg.dropout))
        self.coarse_head = nn.Linear(d, len(labels.coarse))
        self.fine_head = nn.Linear(d, len(labels.fine))
        self.fertility_head = nn.Linear(d, cfg.max_fertility)
        self.slot_in = nn.Linear(d, cfg.slot_hidden)
        self.rank_embed = nn.Embedding(cfg.max_fertility, cfg.slot_hidden) if cfg.copy_rank_embedding else None
        self.slot_encoder = TransformerEncoder(OrtConfig(
            layers=cfg.slot_layers, heads=cfg.slot_heads, hidden_dim=cfg.slot_hidden, positional_mode="sinusoid",
            feed_forward="linear", ff_dim=cfg.slot_ff, dropout=cfg.dropout))
        self.slot_head = nn.Linear(cfg.slot_hidden, len(labels.slots))

    @property
    def decoder_calls(self) -> int:
        return self.slot_encoder.calls

    def encode(self, ids, mask):
        """Return ``(summary, H)``: the ``[CLS]`` state and one state per token."""
        x = self.embed(ids)
        b = x.shape[0]
        x = torch.cat([self.cls.expand(b, 1, -1).to(x.dtype), x], dim=1)
        m = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        h = self.encoder(x, m)
        return h[:, 0], h[:, 1:]

    def decode_slots(self, H, mask, fertility):
        """Copy states by ``fertility`` (list of lists) and classify each copy."""
        rows = [copy_hiddens(H[k, : len(f)], f) for k, f in enumerate(fertility)]
        expanded = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        slot_mask = torch.zeros(expanded.shape[:2], dtype=torch.bool)
        for k, r in enumerate(rows):
            slot_mask[k, : r.shape[0]] = True
        z = self.slot_in(expanded)
        if self.rank_embed is not None:
            ranks = torch.zeros(expanded.shape[:2], dtype=torch.long)
            for k, f in enumerate(fertility):
                rk = copy_ranks(f)
                ranks[k, : len(rk)] = torch.as_tensor(rk, dtype=torch.long)
            z = z + self.rank_embed(ranks)
        out = self.slot_encoder(z, slot_mask)
        return self.slot_head(out), slot_mask

    def forward(self, ids, mask, fertility=None):
        summary, H = self.encode(ids, mask)
        out = {"coarse": self.coarse_head(summary), "fine": self.fine_head(H),
               "fertility": self.fertility_head(H)}
        if fertility is None:
            pred = out["fertility"].argmax(-1) + 1
            fertility = [pred[k, : int(mask[k].sum())].tolist() for k in range(ids.shape[0])]
        out["slots"], out["slot_mask"] = self.decode_slots(H, mask, fertility)
        out["used_fertility"] = fertility
        return out


# --------------------------------------------------------------------------
# batching and loss

def make_batch(examples, model: X2Parser) -> dict:
    vocab, labels = model.vocab, model.labels
    ids, mask = pad_batch([vocab.encode(ex.tokens) for ex in examples])
    n = ids.shape[1]
    fine = torch.zeros(len(examples), n, dtype=torch.long)
    fert = torch.ones(len(examples), n, dtype=torch.long)
    slot_lists = []
    for k, ex in enumerate(examples):
        fine[k, : len(ex.tokens)] = torch.as_tensor(labels.fine.encode(ex.flat.fine_intents))
        fert[k, : len(ex.tokens)] = torch.as_tensor(ex.fertility)
        slot_lists.append(labels.slots.encode(ex.flat.flattened_slots()))
    slots, slot_mask = pad_batch(slot_lists)
    coarse = torch.as_tensor(labels.coarse.encode([ex.flat.coarse_intent for ex in examples]))
    return {"ids": ids, "mask": mask, "coarse": coarse, "fine": fine, "fertility": fert,
            "gold_fertility": [ex.fertility for ex in examples], "slots": slots, "slot_mask": slot_mask}


def x2_loss(batch: dict, model: X2Parser, return_terms: bool = False):
    """Weighted sum of the coarse, fine, fertility and slot cross-entropies.

    Copying is teacher-forced with the gold fertility.
    """
    for f, m in zip(batch["gold_fertility"], batch["slot_mask"]):
        if sum(f) != int(m.sum()):
            raise ValueError(f"slot target length {int(m.sum())} != total fertility {sum(f)}")
    out = model(batch["ids"], batch["mask"], fertility=batch["gold_fertility"])
    mask = batch["mask"]
    if out["fertility"].shape[-1] < int(batch["fertility"][mask].max()):
        raise ValueError("gold fertility exceeds the classifier range")
    terms = {
        "coarse": F.cross_entropy(out["coarse"], batch["coarse"]),
        "fine": F.cross_entropy(out["fine"][mask], batch["fine"][mask]),
        "fertility": F.cross_entropy(out["fertility"][mask], batch["fertility"][mask] - 1),
        "slots": F.cross_entropy(out["slots"][out["slot_mask"]], batch["slots"][batch["slot_mask"]]),
    }
    w = model.cfg.loss_weights
    total = w[0] * terms["coarse"] + w[1] * terms["fine"] + w[2] * terms["fertility"] + w[3] * terms["slots"]
    return (total, terms) if return_terms else total


# --------------------------------------------------------------------------
# inference

@dataclass
class ParseResult:
    tree: ParseTree
    flat: FlatLabels
    fertility: list
    repairs: list = field(default_factory=list)
    decoder_calls: int = 0


@torch.no_grad()
def parse_batch(token_lists, model: X2Parser, fertility=None) -> list[ParseResult]:
    """Parse several utterances with one encoder pass and one slot-decoder pass."""
    was_training = model.training
    model.eval()
    ids, mask = pad_batch([model.vocab.encode(t) for t in token_lists])
    before = model.decoder_calls
    out = model(ids, mask, fertility=fertility)
    calls = model.decoder_calls - before
    results = []
    for k, tokens in enumerate(token_lists):
        n = len(tokens)
        fert = list(out["used_fertility"][k])
        coarse = model.labels.coarse.itos[int(out["coarse"][k].argmax())]
        fine = model.labels.fine.decode(out["fine"][k, :n].argmax(-1).tolist())
        m = int(out["slot_mask"][k].sum())
        flat_slots = model.labels.slots.decode(out["slots"][k, :m].argmax(-1).tolist())
        flat = FlatLabels(coarse, fine, regroup(flat_slots, fert))
        try:
            tree, repairs = decode_flat_verbose(flat, tokens, repair=True)
        except ParseReprError as err:
            tree = ParseTree(tuple(tokens), IntentNode(coarse, (1, n)))
            repairs = list(err.diagnostics) or [Diagnostic("Undecodable", 1, str(err))]
        results.append(ParseResult(tree, flat, fert, repairs, calls))
    if was_training:
        model.train()
    return results


def parse_utterance(tokens, model: X2Parser, fertility=None) -> ParseResult:
    return parse_batch([list(tokens)], model, None if fertility is None else [list(fertility)])[0]


# --------------------------------------------------------------------------
# training

def build_model(trees, cfg: X2Config | None = None, seed: int = 0) -> tuple[X2Parser, list[X2Example]]:
    cfg = cfg or X2Config()
    examples = [X2Example.from_tree(t, cfg.max_fertility) for t in trees]
    vocab = Vocab.build([ex.tokens for ex in examples])
    labels = X2Labels.build(ex.flat for ex in examples)
    torch.manual_seed(seed)
    return X2Parser(vocab, labels, cfg), examples


def train(model: X2Parser, examples, steps: int = 300, batch_size: int = 32, lr: float = 2e-3,
          seed: int = 0, log_every: int = 0, eval_fn=None):
    """Adam on shuffled minibatches; returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    order = rng.permutation(len(examples))
    pos = 0
    model.train()
    for step in range(1, steps + 1):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(examples)), 0
        batch = make_batch([examples[i] for i in order[pos:pos + batch_size]], model)
        pos += batch_size
        loss = x2_loss(batch, model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            msg = f"step {step} loss {np.mean(history[-log_every:]):.4f}"
            if eval_fn is not None:
                msg += f" {eval_fn(model)}"
            print(msg, flush=True)
    model.eval()
    return history


def exact_match_rate(model: X2Parser, examples, batch_size: int = 64) -> float:
    hits = 0
    for k in range(0, len(examples), batch_size):
        chunk = examples[k:k + batch_size]
        for ex, res in zip(chunk, parse_batch([ex.tokens for ex in chunk], model)):
            hits += res.flat == ex.flat
    return hits / max(1, len(examples))


def save(model: X2Parser, path: str) -> None:
    torch.save({"config": asdict(model.cfg), "vocab": model.vocab.itos, "labels": model.labels.to_dict(),
                "state": model.state_dict()}, path)


def load(path: str) -> X2Parser:
    blob = torch.load(path, weights_only=False)
    cfg = X2Config(**{**blob["config"], "loss_weights": tuple(blob["config"]["loss_weights"])})
    model = X2Parser(Vocab(blob["vocab"], ()), X2Labels.from_dict(blob["labels"]), cfg)
    model.load_state_dict(blob["state"])
    model.eval()
    return model


def main(argv=None):
    p = argparse.ArgumentParser(description="train the parser on a parse JSONL file")
    p.add_argument("data")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save")
    args = p.parse_args(argv)
    with open(args.data, encoding="utf-8") as f:
        trees = [parse_hierarchical(json.loads(line)["parse"]) for line in f if line.strip()]
    model, examples = build_model(trees, seed=args.seed)
    t0 = time.time()
    train(model, examples, steps=args.steps, seed=args.seed, log_every=50)
    print(f"train EM {exact_match_rate(model, examples):.4f} ({time.time() - t0:.1f}s)")
    if args.save:
        save(model, args.save)


if __name__ == "__main__":
    main()
