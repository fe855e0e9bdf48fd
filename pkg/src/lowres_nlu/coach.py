"""Coarse-to-fine cross-domain slot filling.

Step one tags every token B/I/O with a BiLSTM-CRF, ignoring slot types.
Step two encodes each detected span and scores it against a description
vector per slot type, so types unseen in training can be predicted from
their descriptions. Template regularization pulls the utterance
representation toward a correctly delexicalized template and away from
wrong ones.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .bio import labels_from_spans, spans_from_bio
from .encoders import CRF, LSTMEncoder
from .tagger import Vocab, pad_batch
from .xling_reg import AttentionPool

COARSE_LABELS = ("O", "B", "I")


@dataclass
class CoachConfig:
    hidden: int = 64
    layers: int = 2
    span_encoder: str = "recurrent"
    beta: float = 1.0
    warmup_epochs: int = 2
    use_templates: bool = True
    freeze_embeddings: bool = True
    dropout: float = 0.3

    def __post_init__(self):
        if self.span_encoder not in ("recurrent", "attention", "sum"):
            raise ValueError("span_encoder must be recurrent, attention or sum")


def type_token(slot_type: str) -> str:
    return f"<{slot_type}>"


def coarse_labels(labels) -> list[str]:
    return [lab if lab == "O" else lab[0] for lab in labels]


def read_descriptions(path) -> dict[str, list[str]]:
    """Slot description file: ``TYPE<TAB>description words`` per line."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected TYPE<TAB>words")
            typ, words = line.rstrip("\n").split("\t", 1)
            out[typ.strip()] = words.split()
    return out


def description_matrix(types, descriptions, lookup) -> torch.Tensor:
    """One row per type: the sum of its description-word embeddings."""
    return torch.stack([sum(lookup(w) for w in descriptions[t]) for t in types])


def make_templates(tokens, labels, inventory, seed) -> tuple[list[str], list[list[str]], bool]:
    """Right template, two wrong templates, and whether the utterance had entities.

    Each entity span collapses to one type token. In a wrong template every
    span gets a type drawn uniformly from the inventory minus its gold type.
    """
    spans = spans_from_bio(labels)
    if not spans:
        return list(tokens), [list(tokens), list(tokens)], False
    rng = np.random.default_rng(seed)

    def build(choose):
        out, pos = [], 0
        for s, e, typ in spans:
            out.extend(tokens[pos:s])
            out.append(type_token(choose(typ)))
            pos = e + 1
        out.extend(tokens[pos:])
        return out

    def wrong_type(typ):
        others = [t for t in inventory if t != typ]
        if not others:
            raise ValueError(f"inventory {list(inventory)} has no alternative to {typ}")
        return str(others[int(rng.integers(len(others)))])

    right = build(lambda typ: typ)
    return right, [build(wrong_type), build(wrong_type)], True


def template_losses(R_u, R_r, R_w, beta: float = 1.0):
    """``L_r = MSE(R_u, R_r)``; ``L_w = -beta * mean_w MSE(R_u, R_w)``.

    ``R_w`` is a sequence of wrong-template representations (or a stacked
    tensor whose first axis indexes them).
    """
    l_r = F.mse_loss(R_u, R_r)
    l_w = -beta * torch.stack([F.mse_loss(R_u, w) for w in R_w]).mean()
    return l_r, l_w


class SpanEncoder(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, kind: str = "recurrent"):
        super().__init__()
        self.kind = kind
        if kind == "recurrent":
            self.lstm = LSTMEncoder(d_in, hidden, bidirectional=True)
            d_rep = 2 * hidden
        else:
            d_rep = d_in
            if kind == "attention":
                self.pool = AttentionPool(d_in)
        self.proj = nn.Linear(d_rep, d_out)

    def forward(self, H_span):
        """``H_span``: ``(length, d_in)`` hidden states of one entity."""
        if self.kind == "recurrent":
            out = self.lstm(H_span)
            h = self.lstm.hidden
            rep = torch.cat([out[-1, :h], out[0, h:]])
        elif self.kind == "attention":
            rep = self.pool(H_span)
        else:
            rep = H_span.sum(0)
        return self.proj(rep)


class Coach(nn.Module):
    def __init__(self, vocab: Vocab, embeddings, descriptions: dict, cfg: CoachConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CoachConfig()
        self.vocab = vocab
        emb = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)
        self.embed = nn.Embedding.from_pretrained(emb, freeze=cfg.freeze_embeddings, padding_idx=0)
        d = emb.shape[1]
        self.descriptions = {t: list(w) for t, w in descriptions.items()}
        self.dropout = nn.Dropout(cfg.dropout)
        self.encoder = LSTMEncoder(d, cfg.hidden, layers=cfg.layers, bidirectional=True, dropout=cfg.dropout)
        self.coarse_out = nn.Linear(self.encoder.output_dim, len(COARSE_LABELS))
        self.crf = CRF(len(COARSE_LABELS))
        self.span_encoder = SpanEncoder(self.encoder.output_dim, cfg.hidden, d, cfg.span_encoder)
        self.utt_pool = AttentionPool(self.encoder.output_dim)
        # template encoder has its own parameters
        self.template_encoder = LSTMEncoder(d, cfg.hidden, layers=cfg.layers, bidirectional=True, dropout=cfg.dropout)
        self.template_pool = AttentionPool(self.template_encoder.output_dim)

    def lookup(self, word: str) -> torch.Tensor:
        return self.embed.weight[self.vocab.encode([word])[0]]

    def desc_matrix(self, types) -> torch.Tensor:
        return description_matrix(types, self.descriptions, self.lookup).detach()

    def embed_tokens(self, tokens) -> torch.Tensor:
        rows = []
        for w in tokens:
            if w.startswith("<") and w.endswith(">") and w[1:-1] in self.descriptions:
                rows.append(self.desc_matrix([w[1:-1]])[0])
            else:
                rows.append(self.lookup(w))
        return torch.stack(rows)

    def encode(self, token_lists):
        ids, mask = pad_batch([self.vocab.encode(t) for t in token_lists])
        H = self.encoder(self.dropout(self.embed(ids)), mask)
        return H, mask

    def type_scores(self, H_row, spans, types):
        """``s_k = M_desc r_k`` for every span of one utterance; shape ``(k, n_types)``."""
        if not spans:
            return H_row.new_zeros(0, len(types))
        M = self.desc_matrix(types)
        reps = torch.stack([self.span_encoder(H_row[s:e + 1]) for s, e, *_ in spans])
        return reps @ M.t()

    def template_repr(self, token_lists):
        x = nn.utils.rnn.pad_sequence([self.embed_tokens(t) for t in token_lists], batch_first=True)
        _, mask = pad_batch([[0] * len(t) for t in token_lists])
        return self.template_pool(self.template_encoder(x, mask), mask)

    @torch.no_grad()
    def predict(self, token_lists, types) -> list[list[str]]:
        """Full BIO predictions restricted to ``types``."""
        was = self.training
        self.eval()
        H, mask = self.encode(token_lists)
        paths = self.crf.viterbi(self.coarse_out(H), mask)
        out = []
        for k, path in enumerate(paths):
            coarse = [COARSE_LABELS[i] for i in path]
            spans = spans_from_bio([c if c == "O" else f"{c}-X" for c in coarse])
            typed = []
            if spans:
                best = self.type_scores(H[k], spans, types).argmax(-1).tolist()
                typed = [(s, e, types[j]) for (s, e, _), j in zip(spans, best)]
            out.append(labels_from_spans(len(coarse), typed))
        self.train(was)
        return out

    @torch.no_grad()
    def type_gold_spans(self, token_lists, label_lists, types) -> list[tuple[str, str]]:
        """``(gold type, predicted type)`` for every gold span (typing step in isolation)."""
        was = self.training
        self.eval()
        H, _ = self.encode(token_lists)
        pairs = []
        for k, labels in enumerate(label_lists):
            spans = spans_from_bio(labels)
            if spans:
                best = self.type_scores(H[k], spans, types).argmax(-1).tolist()
                pairs.extend((g, types[j]) for (_, _, g), j in zip(spans, best))
        self.train(was)
        return pairs


@dataclass
class CoachExample:
    tokens: list
    labels: list
    types: tuple  # slot inventory of the utterance's domain


def coach_loss(model: Coach, examples, epoch: int = 0, seed: int = 0, return_terms: bool = False):
    """CRF nll + span typing cross-entropy (+ template terms)."""
    cfg = model.cfg
    H, mask = model.encode([ex.tokens for ex in examples])
    coarse = [[COARSE_LABELS.index(c) for c in coarse_labels(ex.labels)] for ex in examples]
    gold, _ = pad_batch(coarse)
    terms = {"crf": model.crf.nll(model.coarse_out(H), gold, mask)}
    type_losses = []
    for k, ex in enumerate(examples):
        spans = spans_from_bio(ex.labels)
        if spans:
            types = list(ex.types)
            scores = model.type_scores(H[k], spans, types)
            target = torch.as_tensor([types.index(t) for _, _, t in spans])
            type_losses.append(F.cross_entropy(scores, target, reduction="sum"))
    n_spans = sum(len(spans_from_bio(ex.labels)) for ex in examples)
    terms["type"] = torch.stack(type_losses).sum() / n_spans if type_losses else H.new_zeros(())
    terms["r"] = terms["w"] = H.new_zeros(())
    if cfg.use_templates:
        rights, wrongs, keep = [], [], []
        for k, ex in enumerate(examples):
            right, wrong, has = make_templates(ex.tokens, ex.labels, ex.types, [seed, epoch, k])
            if has:
                keep.append(k)
                rights.append(right)
                wrongs.extend(wrong)
        if keep:
            R_u = model.utt_pool(H, mask)[torch.as_tensor(keep)]
            if epoch < cfg.warmup_epochs:
                R_u = R_u.detach()
            R_r = model.template_repr(rights)
            R_w = model.template_repr(wrongs).view(len(keep), 2, -1).transpose(0, 1)
            terms["r"], terms["w"] = template_losses(R_u, R_r, R_w, cfg.beta)
    total = terms["crf"] + terms["type"] + terms["r"] + terms["w"]
    return (total, terms) if return_terms else total


def train_coach(model: Coach, examples, epochs: int = 5, batch_size: int = 16, lr: float = 1e-3,
                seed: int = 0, start_epoch: int = 0, log=None):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)
    history = []
    model.train()
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.permutation(len(examples))
        losses = []
        for k in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[k:k + batch_size]]
            loss = coach_loss(model, batch, epoch, seed)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch} loss {history[-1]:.4f}")
    model.eval()
    return history


def build_from_world(world, cfg: CoachConfig | None = None, seed: int = 0) -> Coach:
    """Coach over the vocabulary and embedding table of a :class:`ToySlotWorld`."""
    words = sorted(world.table)
    vocab = Vocab(words)
    table = np.zeros((len(vocab), world.dim))
    for w in words:
        table[vocab.stoi[w]] = world.table[w]
    torch.manual_seed(seed)
    return Coach(vocab, table, world.descriptions, cfg)


def main(argv=None):
    from .harness.metrics import bio_f1
    from .synthetic import ToySlotWorld

    p = argparse.ArgumentParser(description="toy cross-domain transfer run")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--shots", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    world = ToySlotWorld(seed=args.seed)
    source = [CoachExample(t, l, world.domains[d]) for k, d in enumerate(("music", "travel"))
              for t, l in world.corpus(d, 300, args.seed + 100 * (k + 1))]
    target_types = list(world.domains["food"])
    test = world.corpus("food", 200, args.seed + 7)
    model = build_from_world(world, seed=args.seed)
    train_coach(model, source, epochs=args.epochs, seed=args.seed, log=print)
    pairs = model.type_gold_spans([t for t, _ in test], [l for _, l in test], target_types)
    unseen = [p == g for g, p in pairs if g == world.unseen]
    print(f"zero-shot unseen-type accuracy {np.mean(unseen):.3f} (chance {1 / len(target_types):.3f})")
    shots = [CoachExample(t, l, world.domains["food"]) for t, l in world.corpus("food", args.shots, args.seed + 3)]
    train_coach(model, shots, epochs=args.epochs, seed=args.seed, start_epoch=args.epochs)
    pred = model.predict([t for t, _ in test], target_types)
    print("50-shot span F1 %.2f" % bio_f1([l for _, l in test], pred)[2])


if __name__ == "__main__":
    main()
