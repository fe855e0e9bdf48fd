"""BIO sequence tagger: embeddings -> encoder -> (CRF | softmax)."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .encoders import CRF, LSTMEncoder, OrtConfig, TransformerEncoder


class Vocab:
    """String <-> id table with reserved padding and unknown entries."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, words=(), specials=(PAD, UNK)):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        for w in list(specials) + list(words):
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def encode(self, words) -> list[int]:
        unk = self.stoi.get(self.UNK, 0)
        return [self.stoi.get(w, unk) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, sequences, min_count: int = 1, specials=(PAD, UNK)):
        counts: dict[str, int] = {}
        for seq in sequences:
            for w in seq:
                counts[w] = counts.get(w, 0) + 1
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return cls(words, specials)


def pad_batch(seqs, pad: int = 0):
    """List of id lists -> (LongTensor ids, BoolTensor mask)."""
    n = max((len(s) for s in seqs), default=0)
    ids = torch.full((len(seqs), max(n, 1)), pad, dtype=torch.long)
    mask = torch.zeros(len(seqs), max(n, 1), dtype=torch.bool)
    for k, s in enumerate(seqs):
        ids[k, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[k, : len(s)] = True
    return ids, mask


def build_encoder(kind: str, input_dim: int, hidden: int, layers: int = 2, heads: int = 4,
                  conv_kernel: int = 3, dropout: float = 0.0):
    """``ort``, ``transformer`` or ``bilstm``; returns a module with ``output_dim``."""
    if kind == "ort":
        cfg = OrtConfig(layers=layers, heads=heads, hidden_dim=input_dim, conv_kernel=conv_kernel,
                        positional_mode="none", ff_dim=hidden, dropout=dropout)
        return TransformerEncoder(cfg)
    if kind == "transformer":
        cfg = OrtConfig(layers=layers, heads=heads, hidden_dim=input_dim, positional_mode="sinusoid",
                        feed_forward="linear", ff_dim=hidden, dropout=dropout)
        return TransformerEncoder(cfg)
    if kind == "bilstm":
        return LSTMEncoder(input_dim, hidden, layers=layers, bidirectional=True, dropout=dropout)
    raise ValueError(f"unknown encoder kind {kind!r}")


class SequenceTagger(nn.Module):
    def __init__(self, vocab_size: int, num_labels: int, embed_dim: int = 64, hidden: int = 64,
                 encoder: str = "ort", layers: int = 2, heads: int = 4, conv_kernel: int = 3,
                 use_crf: bool = True, dropout: float = 0.0, embeddings=None, freeze_embeddings=False):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        if embeddings is not None:
            self.embed.weight.data.copy_(torch.as_tensor(embeddings, dtype=torch.float32))
        self.embed.weight.requires_grad_(not freeze_embeddings)
        self.encoder = build_encoder(encoder, embed_dim, hidden, layers, heads, conv_kernel, dropout)
        self.out = nn.Linear(self.encoder.output_dim, num_labels)
        self.crf = CRF(num_labels) if use_crf else None

    def emissions(self, ids, mask):
        return self.out(self.encoder(self.embed(ids), mask))

    def loss(self, ids, mask, tags):
        em = self.emissions(ids, mask)
        if self.crf is not None:
            return self.crf.nll(em, tags, mask)
        return F.cross_entropy(em[mask], tags[mask])

    @torch.no_grad()
    def predict(self, ids, mask) -> list[list[int]]:
        em = self.emissions(ids, mask)
        if self.crf is not None:
            return self.crf.viterbi(em, mask)
        best = em.argmax(-1)
        return [best[k, : int(mask[k].sum())].tolist() for k in range(ids.shape[0])]
