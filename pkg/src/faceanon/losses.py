"""Adversarial and metric-learning objectives (torch, any float dtype)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class GanLabels:
    fake: float = 0.0
    real: float = 1.0

    def __post_init__(self):
        if self.fake == self.real:
            raise ConfigError("GAN labels for fake and real data must differ")


def _nonempty(*tensors):
    for t in tensors:
        if t.numel() == 0:
            raise ValueError("loss needs a non-empty batch")


def lsgan_d_loss(d_real, d_fake, labels: GanLabels = GanLabels()):
    """Least-squares critic loss: push real scores to ``real`` and fake ones to ``fake``."""
    _nonempty(d_real, d_fake)
    return 0.5 * ((d_real - labels.real) ** 2).mean() + 0.5 * ((d_fake - labels.fake) ** 2).mean()


def lsgan_g_loss(d_fake, labels: GanLabels = GanLabels()):
    _nonempty(d_fake)
    return 0.5 * ((d_fake - labels.real) ** 2).mean()


def proxy_nca_loss(embeddings, labels, proxies, normalize: bool = True):
    """Mean Proxy-NCA loss over a batch.

    For each sample: ``d(x, p_y) + log sum_{z != y} exp(-d(x, p_z))`` with
    squared Euclidean ``d``.  The positive proxy is excluded from the
    denominator, so the value goes negative once negatives are far enough.
    """
    if embeddings.dim() == 1:
        embeddings = embeddings[None]
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device).reshape(-1)
    n = proxies.shape[0]
    if n < 2:
        raise ValueError("Proxy-NCA needs at least two proxies")
    _nonempty(embeddings)
    if normalize:
        embeddings = F.normalize(embeddings, dim=1)
        proxies = F.normalize(proxies, dim=1)
    dist = ((embeddings[:, None, :] - proxies[None, :, :]) ** 2).sum(-1)
    pos = dist.gather(1, labels[:, None]).squeeze(1)
    neg_mask = torch.ones_like(dist, dtype=torch.bool)
    neg_mask[torch.arange(len(labels)), labels] = False
    neg = dist.masked_fill(~neg_mask, float("inf"))
    return (pos + torch.logsumexp(-neg, dim=1)).mean()


def contrastive_loss(e1, e2, same, margin: float = 1.0):
    """Mean of ``d^2/2`` for matching pairs and ``max(0, m - d)^2/2`` otherwise."""
    _nonempty(e1, e2)
    if e1.dim() == 1:
        e1, e2 = e1[None], e2[None]
    same = torch.as_tensor(same, dtype=torch.bool, device=e1.device).reshape(-1)
    sq = ((e1 - e2) ** 2).sum(-1)
    positive = sq > 0
    # sqrt has an infinite slope at 0; route those entries through a dummy
    d = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    pos_term = 0.5 * sq
    neg_term = 0.5 * torch.clamp(margin - d, min=0) ** 2
    return torch.where(same, pos_term, neg_term).mean()


class ProxyBank(nn.Module):
    """One learnable proxy vector per training identity."""

    def __init__(self, n_identities: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if n_identities < 2:
            raise ValueError("a proxy bank needs at least two identities")
        init = torch.randn(n_identities, dim, generator=generator) / dim ** 0.5
        self.proxies = nn.Parameter(init)

    def forward(self, embeddings, labels):
        return proxy_nca_loss(embeddings, labels, self.proxies)
