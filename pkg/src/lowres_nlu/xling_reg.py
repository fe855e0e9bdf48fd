"""Regularizers for cross-lingual slot filling and intent detection.

Gaussian noise on source embeddings, latent-variable prediction heads,
label-sequence regularization of utterance representations, and the
adversarial latent-variable losses. ``XlingModel`` wires them into a BiLSTM
slot/intent model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoders import LSTMEncoder
from .tagger import pad_batch


@dataclass
class NoiseConfig:
    variance: float = 0.1
    enabled_in_training_only: bool = True

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("noise variance must be >= 0")


def inject_noise(E: torch.Tensor, cfg: NoiseConfig, training: bool, generator=None) -> torch.Tensor:
    """Add fresh N(0, variance) noise in training mode; identity otherwise."""
    if cfg.variance == 0 or (cfg.enabled_in_training_only and not training):
        return E
    noise = torch.randn(E.shape, generator=generator, dtype=E.dtype, device=E.device)
    return E + noise * cfg.variance ** 0.5


def attention_pool(H: torch.Tensor, w: torch.Tensor, mask=None, return_weights: bool = False):
    """Softmax(H w)-weighted sum of rows. ``H`` is ``(n, d)`` or ``(batch, n, d)``."""
    scores = H @ w
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    a = torch.softmax(scores, dim=-1)
    pooled = (a.unsqueeze(-1) * H).sum(-2)
    return (pooled, a) if return_weights else pooled


class AttentionPool(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w = nn.Parameter(torch.randn(d) / d ** 0.5)

    def forward(self, H, mask=None):
        return attention_pool(H, self.w, mask)


class LatentHead(nn.Module):
    """Recognition layer -> Gaussian (mu, log var) -> generation layer.

    Training samples ``z = mu + sigma * eps``; evaluation uses ``z = mu``.
    """

    def __init__(self, d_in: int, d_z: int, n_classes: int):
        super().__init__()
        self.d_z = d_z
        self.recognition = nn.Linear(d_in, 2 * d_z)
        self.generation = nn.Linear(d_z, n_classes)

    def latent(self, h, sample: bool, generator=None):
        mu, logvar = self.recognition(h).chunk(2, dim=-1)
        if not sample:
            return mu, mu, logvar
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + torch.exp(0.5 * logvar) * eps, mu, logvar

    def forward(self, h, sample: bool | None = None, generator=None):
        """Return ``(logits, z)``; ``sample`` defaults to ``self.training``."""
        z, _, _ = self.latent(h, self.training if sample is None else sample, generator)
        return self.generation(z), z


def lvm_predict(h, head: LatentHead, training: bool, generator=None) -> torch.Tensor:
    logits, _ = head(h, sample=training, generator=generator)
    return torch.softmax(logits, dim=-1)


def _cosine(a, b):
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    return (a * b).sum(-1) / (na * nb)


def label_reg_loss(u_a, u_b, l_a, l_b) -> torch.Tensor:
    """Sum over pairs of (cos(u_a, u_b) - cos(l_a, l_b))^2."""
    return ((_cosine(u_a, u_b) - _cosine(l_a, l_b)) ** 2).sum()


class Adversary(nn.Module):
    """Linear layer + softmax that is fit to a uniform distribution over slot types."""

    def __init__(self, d_z: int, n_types: int):
        super().__init__()
        self.linear = nn.Linear(d_z, n_types)

    def forward(self, z):
        return torch.softmax(self.linear(z), dim=-1)


def alvm_losses(z, gold, adversary: Adversary, mask=None, reduction: str = "sum"):
    """Return ``(L_fc, L_lvm)``.

    ``L_fc`` pulls the adversary's output toward uniform and sees ``z``
    detached, so it only trains the adversary. ``L_lvm`` pulls the adversary's
    output toward the gold one-hot with the adversary weights detached, so it
    only trains what produced ``z``. ``gold`` is class indices or one-hot rows.
    """
    n_s = adversary.linear.out_features
    if n_s < 2:
        raise ValueError("need at least two slot types")
    if gold.dim() == z.dim() - 1:
        gold = F.one_hot(gold, n_s)
    gold = gold.to(z.dtype)
    p_fc = adversary(z.detach())
    w, b = adversary.linear.weight.detach(), adversary.linear.bias.detach()
    p_lvm = torch.softmax(F.linear(z, w, b), dim=-1)
    l_fc = ((p_fc - 1.0 / n_s) ** 2).mean(-1)
    l_lvm = ((p_lvm - gold) ** 2).mean(-1)
    if mask is not None:
        keep = mask.to(z.dtype)
        l_fc, l_lvm = l_fc * keep, l_lvm * keep
        count = keep.sum().clamp(min=1)
    else:
        count = l_fc.numel()
    if reduction == "sum":
        return l_fc.sum(), l_lvm.sum()
    if reduction == "mean":
        return l_fc.sum() / count, l_lvm.sum() / count
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossWeights:
    """Adversarial loss weights. ``alpha`` holds for ``warm_epochs`` then decays."""

    alpha: float = 1.0
    beta: float = 1.0
    warm_epochs: int = 2
    decay: float = 0.9

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")

    def alpha_at(self, epoch: int) -> float:
        """``epoch`` is 0-based."""
        if epoch < self.warm_epochs:
            return self.alpha
        return self.alpha * self.decay ** (epoch - self.warm_epochs + 1)

    def schedule(self, epochs: int) -> list[tuple[float, float]]:
        return [(self.alpha_at(e), self.beta) for e in range(epochs)]


# --------------------------------------------------------------------------
# full model

class LabelEncoder(nn.Module):
    """Embeds a slot-label sequence, runs a BiLSTM and pools it to one vector."""

    def __init__(self, n_labels: int, embed_dim: int = 100, hidden: int = 150):
        super().__init__()
        self.embed = nn.Embedding(n_labels, embed_dim, padding_idx=0)
        self.lstm = LSTMEncoder(embed_dim, hidden, bidirectional=True)
        self.pool = AttentionPool(self.lstm.output_dim)

    def forward(self, label_ids, mask):
        return self.pool(self.lstm(self.embed(label_ids), mask), mask)


class XlingModel(nn.Module):
    """BiLSTM slot filler and intent classifier with latent heads and regularizers.

    Slot ids index ``slot_labels`` (BIO strings, with ``O`` at 1 and padding
    at 0); the adversary classifies slot *types* (``O`` plus every entity type).
    """

    def __init__(self, vocab_size: int, n_slots: int, n_intents: int, n_types: int, embed_dim: int = 64,
                 hidden: int = 64, d_z: int = 32, label_embed: int = 32, label_hidden: int = 32,
                 noise: NoiseConfig | None = None, embeddings=None, freeze_embeddings: bool = True):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        if embeddings is not None:
            self.embed.weight.data.copy_(torch.as_tensor(embeddings, dtype=torch.float32))
            self.embed.weight.requires_grad_(not freeze_embeddings)
        self.noise = noise or NoiseConfig()
        self.lstm = LSTMEncoder(embed_dim, hidden, bidirectional=True)
        d = self.lstm.output_dim
        self.pool = AttentionPool(d)
        self.slot_head = LatentHead(d, d_z, n_slots)
        self.intent_head = LatentHead(d, d_z, n_intents)
        self.adversary = Adversary(d_z, n_types)
        self.label_encoder = LabelEncoder(n_slots, label_embed, label_hidden)

    def forward(self, ids, mask, generator=None):
        e = inject_noise(self.embed(ids), self.noise, self.training, generator)
        H = self.lstm(e, mask)
        u = self.pool(H, mask)
        slot_logits, z = self.slot_head(H, generator=generator)
        intent_logits, _ = self.intent_head(u, generator=generator)
        return {"slots": slot_logits, "intent": intent_logits, "z": z, "u": u}

    def adversary_parameters(self):
        return list(self.adversary.parameters())

    def main_parameters(self):
        skip = {id(p) for p in self.adversary.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]


def make_xling_batch(examples, vocab, slot_vocab, intent_vocab, type_of):
    """``examples``: (tokens, bio labels, intent). ``type_of`` maps a slot id to a type id."""
    ids, mask = pad_batch([vocab.encode(t) for t, _, _ in examples])
    slots, _ = pad_batch([slot_vocab.encode(l) for _, l, _ in examples])
    intents = torch.as_tensor(intent_vocab.encode([i for _, _, i in examples]), dtype=torch.long)
    types = torch.as_tensor(type_of, dtype=torch.long)[slots]
    return {"ids": ids, "mask": mask, "slots": slots, "intents": intents, "types": types}


def xling_loss(model: XlingModel, batch, alpha: float = 1.0, beta: float = 1.0, use_lr: bool = True,
               use_alvm: bool = True, rng: np.random.Generator | None = None, generator=None,
               return_terms: bool = False):
    """``L^S + L^I + L^lr + alpha L^fc + beta L^lvm`` averaged per token / utterance."""
    out = model(batch["ids"], batch["mask"], generator)
    mask = batch["mask"]
    terms = {"slots": F.cross_entropy(out["slots"][mask], batch["slots"][mask]),
             "intent": F.cross_entropy(out["intent"], batch["intents"])}
    zero = out["u"].new_zeros(())
    terms["lr"] = zero
    b = batch["ids"].shape[0]
    if use_lr and b >= 2:
        rng = rng or np.random.default_rng(0)
        order = torch.as_tensor(rng.permutation(b)[: b - b % 2])
        a_idx, b_idx = order[0::2], order[1::2]
        l = model.label_encoder(batch["slots"], mask)
        terms["lr"] = label_reg_loss(out["u"][a_idx], out["u"][b_idx], l[a_idx], l[b_idx]) / len(a_idx)
    terms["fc"], terms["lvm"] = zero, zero
    if use_alvm:
        terms["fc"], terms["lvm"] = alvm_losses(out["z"], batch["types"], model.adversary, mask, "mean")
    total = terms["slots"] + terms["intent"] + terms["lr"] + alpha * terms["fc"] + beta * terms["lvm"]
    return (total, terms) if return_terms else total


def pretrain_label_encoder(model: XlingModel, batches, epochs: int = 3, lr: float = 1e-3, seed: int = 0,
                           use_alvm: bool = False):
    """Train on source-language batches with the task losses plus ``L^lr``.

    Returns ``(label encoder state dict, per-epoch mean L^lr)``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)
    history = []
    model.train()
    for _ in range(epochs):
        lr_terms = []
        for batch in batches:
            loss, terms = xling_loss(model, batch, use_alvm=use_alvm, rng=rng, return_terms=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_terms.append(terms["lr"].item())
        history.append(float(np.mean(lr_terms)))
    model.eval()
    state = {k: v.detach().clone() for k, v in model.label_encoder.state_dict().items()}
    return state, history


def train_xling(model: XlingModel, batches, epochs: int = 5, lr: float = 1e-3, weights: LossWeights | None = None,
                use_lr: bool = True, use_alvm: bool = True, seed: int = 0):
    """Joint training; the adversary and the rest use separate optimizers."""
    weights = weights or LossWeights()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    main_opt = torch.optim.Adam([p for p in model.main_parameters() if p.requires_grad], lr=lr)
    adv_opt = torch.optim.Adam(model.adversary_parameters(), lr=lr)
    history = []
    model.train()
    for epoch in range(epochs):
        alpha = weights.alpha_at(epoch)
        losses = []
        for batch in batches:
            loss = xling_loss(model, batch, alpha, weights.beta, use_lr, use_alvm, rng)
            main_opt.zero_grad()
            adv_opt.zero_grad()
            loss.backward()
            main_opt.step()
            adv_opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "alpha": alpha, "beta": weights.beta, "loss": float(np.mean(losses))})
    model.eval()
    return history
