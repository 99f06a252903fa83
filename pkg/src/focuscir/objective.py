"""Batch-based classification loss, focus-degree distributions and focus regularisation."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import HyperConfig


class DegenerateBatch(ValueError):
    pass


@dataclass
class FocusDistribution:
    f: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in ("composed", "target"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.f.dim() != 2 or self.f.shape[0] != self.f.shape[1]:
            raise ValueError(f"expected a square B x B matrix, got {tuple(self.f.shape)}")
        rows = self.f.detach().sum(dim=-1)
        if not torch.allclose(rows, torch.ones_like(rows), atol=1e-6):
            raise ValueError("focus distribution rows must sum to 1")
        if not bool((self.f.detach() > 0).all()):
            raise ValueError("focus distribution entries must be positive")


@dataclass
class LossBundle:
    L_rank: torch.Tensor
    L_fr: torch.Tensor
    total: torch.Tensor
    tau: float
    mu: float
    rank_weight: float = 1.0

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("L_rank", "L_fr", "total")}


def pool(features: torch.Tensor) -> torch.Tensor:
    """Mean over the channel axis: (..., K, D) -> (..., D)."""
    return features.mean(dim=-2)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms.detach() == 0).any()):
        raise DegenerateBatch("cosine similarity of a zero vector is undefined")
    return x / norms


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _normalize(a) @ _normalize(b).T


def bbc_loss(fc: torch.Tensor, ft: torch.Tensor, tau: float) -> torch.Tensor:
    if fc.shape[0] < 2:
        raise DegenerateBatch("batch-based classification needs at least two samples")
    logits = cosine_matrix(fc, ft) / tau
    labels = torch.arange(fc.shape[0])
    return F.cross_entropy(logits, labels)


def per_sample_bbc(fc: torch.Tensor, ft: torch.Tensor, tau: float) -> torch.Tensor:
    logits = cosine_matrix(fc, ft) / tau
    return -torch.log_softmax(logits, dim=-1).diagonal()


def focus_distribution(x: torch.Tensor, ft: torch.Tensor, tau: float, source: str = "composed") -> FocusDistribution:
    return FocusDistribution(torch.softmax(cosine_matrix(x, ft) / tau, dim=-1), source)


def fr_loss(ft: FocusDistribution, fc: FocusDistribution) -> torch.Tensor:
    """Mean over rows of KL(target row || composed row)."""
    if ft.f.shape != fc.f.shape:
        raise ValueError(f"distribution shapes differ: {tuple(ft.f.shape)} vs {tuple(fc.f.shape)}")
    p, q = ft.f, fc.f
    return (p * (torch.log(p) - torch.log(q))).sum(dim=-1).mean()


def _log_distribution(x: torch.Tensor, ft: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.log_softmax(cosine_matrix(x, ft) / tau, dim=-1)


def total_loss(fc_pooled: torch.Tensor, ft_pooled: torch.Tensor, cfg: HyperConfig) -> LossBundle:
    flags = cfg.ablation_flags
    if {"no_BBC", "no_FR"} <= flags:
        raise ValueError("no_BBC together with no_FR leaves nothing to optimise")
    tau = cfg.tau
    l_rank = bbc_loss(fc_pooled, ft_pooled, tau)
    # log-space KL; equal to fr_loss on the softmax distributions but stable for small entries
    log_fc = _log_distribution(fc_pooled, ft_pooled, tau)
    target_src = ft_pooled.detach() if cfg.detach_target_dist else ft_pooled
    log_ft = _log_distribution(target_src, target_src, tau)
    l_fr = (log_ft.exp() * (log_ft - log_fc)).sum(dim=-1).mean()
    rank_weight = 0.0 if "no_BBC" in flags else 1.0
    mu = 0.0 if "no_FR" in flags else cfg.mu
    total = rank_weight * l_rank + mu * l_fr
    return LossBundle(l_rank, l_fr, total, tau=tau, mu=mu, rank_weight=rank_weight)
