"""Sequence encoders and the linear-chain CRF.

Tensors are batch-first: ``(batch, length, dim)`` with a boolean ``mask`` of
shape ``(batch, length)`` that is True on real tokens. Masks must be
left-aligned (padding only at the end).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

POSITIONAL_MODES = ("none", "sinusoid", "trainable", "frozen-pretrained")
LAYER_NORM_EPS = 1e-5


class MissingPositionTable(ValueError):
    pass


@dataclass
class OrtConfig:
    """Hyperparameters for the Transformer-style encoders.

    ``positional_mode="none"`` with ``feed_forward="conv"`` is the
    Order-Reduced Transformer; ``"sinusoid"`` gives the usual Transformer.
    Even kernels are allowed for the kernel-size sweep and are padded
    one more on the right than on the left.
    """

    layers: int = 2
    heads: int = 8
    hidden_dim: int = 256
    conv_kernel: int = 3
    positional_mode: str = "none"
    ff_dim: int | None = None
    feed_forward: str = "conv"
    dropout: float = 0.0
    max_len: int = 512
    position_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1 or self.hidden_dim < 1:
            raise ValueError("layers >= 0, heads >= 1 and hidden_dim >= 1 required")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.conv_kernel < 1:
            raise ValueError("conv_kernel must be >= 1")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ValueError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.feed_forward not in ("conv", "linear"):
            raise ValueError("feed_forward must be 'conv' or 'linear'")
        if self.ff_dim is None:
            self.ff_dim = self.hidden_dim


def _as_batch(x, mask):
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    elif squeeze and mask.dim() == 1:
        mask = mask.unsqueeze(0)
    return x, mask, squeeze


# --------------------------------------------------------------------------
# positions

def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d // 2])
    return table.float()


def positional_embed(n: int, mode: str, d: int, table=None) -> torch.Tensor:
    """Position matrix of shape ``(n, d)`` for ``mode``.

    ``trainable`` and ``frozen-pretrained`` read rows from ``table``; use
    :class:`PositionalEmbedding` to own a trainable table.
    """
    if mode == "none":
        return torch.zeros(n, d)
    if mode == "sinusoid":
        return sinusoid_table(n, d)
    if mode in ("trainable", "frozen-pretrained"):
        if table is None:
            raise MissingPositionTable(f"mode {mode!r} needs a position table")
        table = torch.as_tensor(table, dtype=torch.float32)
        if table.shape[0] < n or table.shape[1] != d:
            raise ValueError(f"position table {tuple(table.shape)} cannot serve ({n}, {d})")
        return table[:n]
    raise ValueError(f"unknown positional mode {mode!r}")


def load_position_table(path) -> np.ndarray:
    """Read a ``rows dim`` header followed by whitespace-separated rows."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        rows, dim = int(header[0]), int(header[1])
        data = np.loadtxt(f, ndmin=2) if rows else np.zeros((0, dim))
    if data.shape != (rows, dim):
        raise ValueError(f"{path}: header says {rows}x{dim}, found {data.shape}")
    return data


def save_position_table(path, table) -> None:
    table = np.asarray(table, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{table.shape[0]} {table.shape[1]}\n")
        np.savetxt(f, table, fmt="%.9g")


class PositionalEmbedding(nn.Module):
    def __init__(self, mode: str, d: int, max_len: int = 512, table=None):
        super().__init__()
        if mode not in POSITIONAL_MODES:
            raise ValueError(f"unknown positional mode {mode!r}")
        self.mode, self.d = mode, d
        self.trainable = mode == "trainable"
        if mode == "trainable":
            self.table = nn.Parameter(torch.randn(max_len, d) * 0.02)
        elif mode == "frozen-pretrained":
            if table is None:
                raise MissingPositionTable("frozen-pretrained positions need a table")
            self.register_buffer("table", torch.as_tensor(np.asarray(table), dtype=torch.float32))
        elif mode == "sinusoid":
            self.register_buffer("table", sinusoid_table(max_len, d), persistent=False)
        else:
            self.table = None

    def forward(self, n: int) -> torch.Tensor:
        if self.table is None:
            return torch.zeros(n, self.d)
        if n > self.table.shape[0]:
            if self.mode != "sinusoid":
                raise ValueError(f"sequence of {n} exceeds position table of {self.table.shape[0]}")
            return sinusoid_table(n, self.d)
        return self.table[:n]


# --------------------------------------------------------------------------
# attention and feed-forward blocks

class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention over ``heads`` projections."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads, self.d_k = d, heads, d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None, return_weights=False):
        x, mask, squeeze = _as_batch(x, mask)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected feature size {self.d}, got {x.shape[-1]}")
        b, n, _ = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.d_k).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        heads = self.dropout(weights) @ v
        out = self.out_proj(heads.transpose(1, 2).reshape(b, n, self.d))
        if squeeze:
            out, weights = out[0], weights[0]
        return (out, weights) if return_weights else out


def multi_head_attention(H, attention: MultiHeadAttention, mask=None):
    return attention(H, mask)


class ConvFeedForward(nn.Module):
    """Conv1d(kernel h) -> ReLU -> pointwise projection; row i sees rows i-h//2..i+h//2."""

    def __init__(self, d: int, ff_dim: int, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(d, ff_dim, kernel)
        self.proj = nn.Linear(ff_dim, d)

    def forward(self, x, mask=None):
        x, mask, squeeze = _as_batch(x, mask)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        left, right = (self.kernel - 1) // 2, self.kernel // 2
        g = F.pad(x.transpose(1, 2), (left, right))
        out = self.proj(torch.relu(self.conv(g)).transpose(1, 2))
        return out[0] if squeeze else out


def conv_feed_forward(G, block: ConvFeedForward, mask=None):
    return block(G, mask)


class LinearFeedForward(nn.Module):
    def __init__(self, d: int, ff_dim: int):
        super().__init__()
        self.inner = nn.Linear(d, ff_dim)
        self.proj = nn.Linear(ff_dim, d)

    def forward(self, x, mask=None):
        return self.proj(torch.relu(self.inner(x)))


class EncoderLayer(nn.Module):
    """``LN(x + MHA(x))`` then ``LN(h + FF(h))``."""

    def __init__(self, cfg: OrtConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.attention = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        if cfg.feed_forward == "conv":
            self.feed_forward = ConvFeedForward(d, cfg.ff_dim, cfg.conv_kernel)
        else:
            self.feed_forward = LinearFeedForward(d, cfg.ff_dim)
        self.norm1 = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.norm2 = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None):
        h = self.norm1(x + self.dropout(self.attention(x, mask)))
        return self.norm2(h + self.dropout(self.feed_forward(h, mask)))


class TransformerEncoder(nn.Module):
    """Stack of encoder layers over embeddings plus positions.

    ``calls`` counts forward passes; the parser uses it to check that decoding
    is a single pass.
    """

    def __init__(self, cfg: OrtConfig):
        super().__init__()
        self.cfg = cfg
        self.positions = PositionalEmbedding(cfg.positional_mode, cfg.hidden_dim, cfg.max_len, cfg.position_table)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.calls = 0

    @property
    def output_dim(self) -> int:
        return self.cfg.hidden_dim

    def forward(self, embedded, mask=None):
        self.calls += 1
        x, mask, squeeze = _as_batch(embedded, mask)
        if self.cfg.positional_mode != "none":
            x = x + self.positions(x.shape[1]).to(x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return x[0] if squeeze else x


def ort_encode(embedded, encoder: TransformerEncoder, mask=None):
    """Run an Order-Reduced Transformer (no positions, convolutional feed-forward)."""
    if encoder.cfg.positional_mode != "none" or encoder.cfg.feed_forward != "conv":
        raise ValueError("ort_encode expects positional_mode='none' and a conv feed-forward")
    return encoder(embedded, mask)


# --------------------------------------------------------------------------
# recurrent encoder

class LSTMCell(nn.Module):
    """One LSTM step with gates computed from ``[h_{t-1}, x_t]``.

    The fused weight stacks the forget, input, candidate and output gates in
    that order; ``W_f``/``b_f`` and friends expose the individual blocks.
    """

    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.input_dim, self.hidden = input_dim, hidden
        self.gates = nn.Linear(hidden + input_dim, 4 * hidden)
        bound = 1 / math.sqrt(hidden)
        nn.init.uniform_(self.gates.weight, -bound, bound)
        nn.init.uniform_(self.gates.bias, -bound, bound)

    def _block(self, k):
        h = self.hidden
        return self.gates.weight[k * h:(k + 1) * h], self.gates.bias[k * h:(k + 1) * h]

    W_f = property(lambda self: self._block(0)[0])
    b_f = property(lambda self: self._block(0)[1])
    W_i = property(lambda self: self._block(1)[0])
    b_i = property(lambda self: self._block(1)[1])
    W_C = property(lambda self: self._block(2)[0])
    b_C = property(lambda self: self._block(2)[1])
    W_o = property(lambda self: self._block(3)[0])
    b_o = property(lambda self: self._block(3)[1])

    def forward(self, x_t, state):
        h_prev, c_prev = state
        f, i, g, o = self.gates(torch.cat([h_prev, x_t], dim=-1)).chunk(4, dim=-1)
        f, i, o = torch.sigmoid(f), torch.sigmoid(i), torch.sigmoid(o)
        c = f * c_prev + i * torch.tanh(g)
        h = o * torch.tanh(c)
        return h, c


def _reverse_within(x, lengths):
    """Reverse each sequence inside its own length, leaving padding in place."""
    b, n = x.shape[:2]
    t = torch.arange(n, device=x.device).unsqueeze(0).expand(b, n)
    lengths = lengths.unsqueeze(1)
    idx = torch.where(t < lengths, lengths - 1 - t, t)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class LSTMEncoder(nn.Module):
    """Stacked (bi)directional LSTM; directions are concatenated per layer."""

    def __init__(self, input_dim: int, hidden: int, layers: int = 1, bidirectional: bool = True,
                 dropout: float = 0.0):
        super().__init__()
        self.hidden, self.bidirectional = hidden, bidirectional
        dirs = 2 if bidirectional else 1
        self.cells = nn.ModuleList()
        for layer in range(layers):
            in_dim = input_dim if layer == 0 else hidden * dirs
            self.cells.append(nn.ModuleList(LSTMCell(in_dim, hidden) for _ in range(dirs)))
        self.dropout = nn.Dropout(dropout)

    @property
    def output_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def _run(self, cell, x):
        b, n, _ = x.shape
        h = x.new_zeros(b, cell.hidden)
        c = x.new_zeros(b, cell.hidden)
        outs = []
        for t in range(n):
            h, c = cell(x[:, t], (h, c))
            outs.append(h)
        return torch.stack(outs, dim=1)

    def forward(self, x, mask=None):
        x, mask, squeeze = _as_batch(x, mask)
        lengths = mask.sum(1)
        for k, directions in enumerate(self.cells):
            if k:
                x = self.dropout(x)
            outs = [self._run(directions[0], x)]
            if self.bidirectional:
                rev = _reverse_within(x, lengths)
                outs.append(_reverse_within(self._run(directions[1], rev), lengths))
            x = torch.cat(outs, dim=-1)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        return x[0] if squeeze else x


def recurrent_encode(embedded, encoder: LSTMEncoder, mask=None):
    return encoder(embedded, mask)


# --------------------------------------------------------------------------
# linear-chain CRF

class CRF(nn.Module):
    """Linear-chain CRF with start/end scores. ``transitions[i, j]`` scores i -> j."""

    def __init__(self, num_labels: int):
        super().__init__()
        if num_labels < 1:
            raise ValueError("need at least one label")
        self.num_labels = num_labels
        self.transitions = nn.Parameter(torch.empty(num_labels, num_labels).uniform_(-0.1, 0.1))
        self.start = nn.Parameter(torch.empty(num_labels).uniform_(-0.1, 0.1))
        self.end = nn.Parameter(torch.empty(num_labels).uniform_(-0.1, 0.1))

    def _prep(self, emissions, mask):
        if emissions.dim() == 2:
            emissions = emissions.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        if mask is None:
            mask = torch.ones(emissions.shape[:2], dtype=torch.bool, device=emissions.device)
        return emissions, mask

    def log_partition(self, emissions, mask=None):
        emissions, mask = self._prep(emissions, mask)
        alpha = self.start + emissions[:, 0]
        for t in range(1, emissions.shape[1]):
            nxt = torch.logsumexp(alpha.unsqueeze(2) + self.transitions, dim=1) + emissions[:, t]
            alpha = torch.where(mask[:, t:t + 1], nxt, alpha)
        return torch.logsumexp(alpha + self.end, dim=1)

    def score(self, emissions, tags, mask=None):
        emissions, mask = self._prep(emissions, mask)
        if tags.dim() == 1:
            tags = tags.unsqueeze(0)
        b, n, _ = emissions.shape
        rows = torch.arange(b, device=emissions.device)
        total = self.start[tags[:, 0]] + emissions[rows, 0, tags[:, 0]]
        for t in range(1, n):
            step = self.transitions[tags[:, t - 1], tags[:, t]] + emissions[rows, t, tags[:, t]]
            total = total + step * mask[:, t].to(emissions.dtype)
        last = tags.gather(1, (mask.sum(1) - 1).unsqueeze(1)).squeeze(1)
        return total + self.end[last]

    def nll(self, emissions, tags, mask=None, reduction: str = "mean"):
        loss = self.log_partition(emissions, mask) - self.score(emissions, tags, mask)
        if reduction == "mean":
            return loss.mean()
        if reduction == "sum":
            return loss.sum()
        return loss

    @torch.no_grad()
    def viterbi(self, emissions, mask=None) -> list[list[int]]:
        emissions, mask = self._prep(emissions, mask)
        b, n, _ = emissions.shape
        score = self.start + emissions[:, 0]
        pointers = []
        for t in range(1, n):
            cand = score.unsqueeze(2) + self.transitions
            best, arg = cand.max(dim=1)
            nxt = best + emissions[:, t]
            keep = mask[:, t:t + 1]
            score = torch.where(keep, nxt, score)
            identity = torch.arange(self.num_labels, device=emissions.device).expand(b, -1)
            pointers.append(torch.where(keep, arg, identity))
        score = score + self.end
        paths = []
        lengths = mask.sum(1).tolist()
        for k in range(b):
            tag = int(score[k].argmax())
            path = [tag]
            for t in range(n - 2, -1, -1):
                tag = int(pointers[t][k, tag])
                path.append(tag)
            path.reverse()
            paths.append(path[: lengths[k]])
        return paths

    def path_score(self, emissions, path) -> torch.Tensor:
        """Unnormalized score of one path for a single ``(n, L)`` emission matrix."""
        tags = torch.as_tensor(path, dtype=torch.long)
        return self.score(emissions, tags)[0]
