"""Association-centric training objective."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
import torch

from .geometry import ConfigError
from .net import DTYPE, ShapeError, SimPair

LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    spatial: float = 0.1
    temporal: float = 2.0
    crossclip: float = 1.0
    l1: float = 0.5
    giou: float = 0.3
    gamma: float = 2.0

    def validate(self) -> "LossWeights":
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")
        return self


def id_mask(row_ids: Sequence, col_ids: Sequence) -> torch.Tensor:
    """True where row and column carry the same (non-None) identity."""
    r = np.array([-1 if i is None else i for i in row_ids], dtype=np.int64)
    c = np.array([-1 if i is None else i for i in col_ids], dtype=np.int64)
    m = (r[:, None] == c[None, :]) & (r[:, None] >= 0)
    return torch.as_tensor(m.reshape(len(r), len(c)))


def self_mask(ids: Sequence) -> torch.Tensor:
    """Mask for a self-attention pair: identity matches plus the diagonal.

    Unlabeled (false-positive) queries are still positive with themselves.
    """
    m = id_mask(ids, ids)
    return m | torch.eye(len(ids), dtype=torch.bool)


def embed_loss(W: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``sum_r log(1 + sum_{w+} sum_{w-} exp(w- - w+))`` with log-sum-exp stabilization."""
    if W.shape != mask.shape:
        raise ShapeError(f"W {tuple(W.shape)} vs mask {tuple(mask.shape)}")
    mask = mask.bool()
    rows = mask.any(dim=1) & (~mask).any(dim=1)
    if not bool(rows.any()):
        return W.sum() * 0.0
    W, mask = W[rows], mask[rows]
    neg_inf = torch.tensor(float("-inf"), dtype=W.dtype)
    lse_neg = torch.logsumexp(torch.where(mask, neg_inf, W), dim=1)
    lse_pos = torch.logsumexp(torch.where(mask, -W, neg_inf), dim=1)
    x = lse_neg + lse_pos
    return torch.logaddexp(torch.zeros_like(x), x).sum()


def focal_aux_loss(S: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if S.shape != mask.shape:
        raise ShapeError(f"S {tuple(S.shape)} vs mask {tuple(mask.shape)}")
    mask = mask.bool()
    pos = (1 - S).clamp_min(0) ** gamma * torch.log(S.clamp_min(LOG_CLAMP))
    neg = S.clamp_min(0) ** gamma * torch.log((1 - S).clamp_min(LOG_CLAMP))
    return -(torch.where(mask, pos, torch.zeros_like(S)).sum()
             + torch.where(mask, torch.zeros_like(S), neg).sum())


def contrastive(pair: SimPair, mask: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    return embed_loss(pair.W, mask) + focal_aux_loss(pair.S, mask, gamma)


def spatial_loss(pairs: Iterable[tuple[SimPair, torch.Tensor]], gamma: float = 2.0) -> torch.Tensor:
    return _sum(contrastive(p, m, gamma) for p, m in pairs)


def temporal_loss(pairs: Iterable[tuple[SimPair, torch.Tensor]], gamma: float = 2.0) -> torch.Tensor:
    # false-positive rows carry all-false masks and act only as negatives
    return _sum(contrastive(p, m, gamma) for p, m in pairs)


def crossclip_loss(pair: SimPair, mask: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    return contrastive(pair, mask, gamma)


def _sum(terms) -> torch.Tensor:
    total = torch.zeros((), dtype=DTYPE)
    for t in terms:
        total = total + t
    return total


def giou_aligned(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise GIoU of two ``(n, 4)`` center-size box tensors."""
    a_lt, a_rb = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b_lt, b_rb = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    wh = (torch.minimum(a_rb, b_rb) - torch.maximum(a_lt, b_lt)).clamp_min(0)
    inter = wh[:, 0] * wh[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    hull_wh = torch.maximum(a_rb, b_rb) - torch.minimum(a_lt, b_lt)
    hull = hull_wh[:, 0] * hull_wh[:, 1]
    return inter / union - (hull - union) / hull


def refine_losses(refined: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-box mean L1 (over 4 normalized coords) and mean ``1 - GIoU``."""
    refined = torch.as_tensor(refined, dtype=DTYPE).reshape(-1, 4)
    gt = torch.as_tensor(gt, dtype=DTYPE).reshape(-1, 4)
    if refined.shape != gt.shape:
        raise ShapeError(f"{refined.shape[0]} refined boxes vs {gt.shape[0]} targets")
    if refined.shape[0] == 0:
        zero = refined.sum() * 0.0
        return zero, zero
    l1 = (refined - gt).abs().mean(dim=1).mean()
    g = (1 - giou_aligned(refined, gt)).mean()
    return l1, g


@dataclass
class LossBreakdown:
    spatial: torch.Tensor
    temporal: torch.Tensor
    crossclip: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def total_loss(spatial, temporal, crossclip, l1, giou, weights: LossWeights) -> LossBreakdown:
    """Weighted sum; contrastive terms arrive already summed over decoder layers."""
    weights.validate()
    total = (weights.spatial * spatial + weights.temporal * temporal + weights.crossclip * crossclip
             + weights.l1 * l1 + weights.giou * giou)
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=DTYPE)
    return LossBreakdown(as_t(spatial), as_t(temporal), as_t(crossclip), as_t(l1), as_t(giou), as_t(total))
