"""The similarity decoder.

Object queries (encoded detections) gather appearance from a feature grid
through in-box sampling attention, pass a feed-forward block and a box
refinement head, then meet track queries in multi-head weight attention,
which emits a cosine similarity matrix ``S`` (clamped to ``[0, 1]``) and an
unbounded dot-product response matrix ``W`` instead of attended values.

Everything runs in float64 by default so gradients can be checked against
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .geometry import ConfigError, encode_boxes

DTYPE = torch.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class FeatureGrid:
    """Dense ``(height, width, d_feat)`` appearance field covering the unit frame."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ShapeError(f"feature grid must be (H, W, d) with positive sizes, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def d_feat(self) -> int:
        return self.data.shape[2]

    @property
    def stride(self) -> tuple[float, float]:
        """Frame units per cell along x and y."""
        return 1.0 / self.width, 1.0 / self.height

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.data, dtype=DTYPE)


@dataclass
class QuerySet:
    queries: torch.Tensor
    boxes: np.ndarray
    scores: np.ndarray
    gt_ids: list = field(default_factory=list)
    track_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        m = self.queries.shape[0]
        if not self.gt_ids:
            self.gt_ids = [None] * m
        if not self.track_ids:
            self.track_ids = [None] * m
        lengths = {len(self.boxes), len(self.scores), len(self.gt_ids), len(self.track_ids)}
        if lengths != {m}:
            raise ShapeError(f"per-row metadata lengths {lengths} disagree with {m} queries")

    def __len__(self) -> int:
        return self.queries.shape[0]

    @classmethod
    def empty(cls, d_model: int) -> "QuerySet":
        return cls(torch.zeros((0, d_model), dtype=DTYPE), np.zeros((0, 4)), np.zeros(0))

    def select(self, idx: Sequence[int]) -> "QuerySet":
        idx = list(idx)
        return QuerySet(
            self.queries[idx] if idx else self.queries[:0],
            self.boxes[idx],
            self.scores[idx],
            [self.gt_ids[i] for i in idx],
            [self.track_ids[i] for i in idx],
        )


@dataclass
class SimPair:
    S: torch.Tensor
    W: torch.Tensor


@dataclass
class ModelConfig:
    d_model: int = 32
    d_feat: int = 8
    num_layers: int = 2
    heads: int = 2
    points: int = 4
    hidden: int = 64

    def validate(self) -> "ModelConfig":
        if self.d_model % 8:
            raise ConfigError("d_model must be divisible by 8")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if min(self.d_feat, self.num_layers, self.heads, self.points, self.hidden) < 1:
            raise ConfigError("model sizes must be positive")
        return self


def linear_forward(layer: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"expected {layer.in_features} input columns, got {x.shape[-1]}")
    return x @ layer.weight.T + layer.bias


def _linear(d_in: int, d_out: int) -> nn.Linear:
    # torch's default init is uniform with fan-in scaling
    return nn.Linear(d_in, d_out, dtype=DTYPE)


def bilinear_sample(grid: torch.Tensor, gx: torch.Tensor, gy: torch.Tensor) -> torch.Tensor:
    """Sample ``grid`` (H, W, d) at continuous cell coordinates.

    Cell ``(i, j)`` sits at ``(gx, gy) = (j, i)``. Coordinates outside the
    lattice clamp to the border. Returns ``gx.shape + (d,)``.
    """
    h, w, d = grid.shape
    gx = gx.clamp(0.0, w - 1)
    gy = gy.clamp(0.0, h - 1)
    x0 = gx.detach().floor().clamp(max=w - 2 if w > 1 else 0)
    y0 = gy.detach().floor().clamp(max=h - 2 if h > 1 else 0)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = grid.reshape(h * w, d)

    def at(yy, xx):
        return flat[(yy * w + xx).reshape(-1)].reshape(*yy.shape, d)

    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    return ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)))


class SampleAttention(nn.Module):
    """Single-scale in-box sampling attention.

    Each head samples ``points`` locations at offsets (in box-size units from
    the box center) predicted from the query, mixes them with softmax weights,
    and the concatenated head outputs are projected back onto the query.
    """

    def __init__(self, d_model: int, d_feat: int, heads: int, points: int):
        super().__init__()
        self.heads, self.points = heads, points
        self.offsets = _linear(d_model, heads * points * 2)
        self.logits = _linear(d_model, heads * points)
        self.out = _linear(heads * d_feat, d_model)
        with torch.no_grad():
            self.offsets.weight.zero_()
            self.logits.weight.zero_()
            self.logits.bias.zero_()
            # points spread on a ring of radius 0.25 box sizes, rotated per head
            k = torch.arange(heads * points, dtype=DTYPE)
            ang = 2 * np.pi * k / (heads * points)
            init = torch.stack([torch.cos(ang), torch.sin(ang)], dim=-1) * 0.25
            self.offsets.bias.copy_(init.reshape(-1))

    def sample(self, q: torch.Tensor, boxes: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
        m = q.shape[0]
        h, w, d = grid.shape
        off = linear_forward(self.offsets, q).reshape(m, self.heads, self.points, 2)
        wts = torch.softmax(linear_forward(self.logits, q).reshape(m, self.heads, self.points), dim=-1)
        px = boxes[:, None, None, 0] + off[..., 0] * boxes[:, None, None, 2]
        py = boxes[:, None, None, 1] + off[..., 1] * boxes[:, None, None, 3]
        vals = bilinear_sample(grid, px * w - 0.5, py * h - 0.5)  # (m, heads, points, d)
        return (wts.unsqueeze(-1) * vals).sum(dim=2).reshape(m, self.heads * d)

    def forward(self, q, boxes, grid):
        if q.shape[0] == 0:
            return q
        return q + linear_forward(self.out, self.sample(q, boxes, grid))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, dtype=DTYPE)
        self.fc1 = _linear(d_model, hidden)
        self.fc2 = _linear(hidden, d_model)

    def forward(self, x):
        if x.shape[-1] != self.fc1.in_features:
            raise ShapeError(f"expected {self.fc1.in_features} columns, got {x.shape[-1]}")
        return x + linear_forward(self.fc2, torch.relu(linear_forward(self.fc1, self.norm(x))))


class RefineHead(nn.Module):
    """MLP predicting ``(dcx, dcy, dlog_w, dlog_h)``; starts as the identity."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = _linear(d_model, hidden)
        self.fc2 = _linear(hidden, hidden)
        self.fc3 = _linear(hidden, 4)
        with torch.no_grad():
            self.fc3.weight.zero_()
            self.fc3.bias.zero_()

    def forward(self, q):
        x = torch.relu(linear_forward(self.fc1, q))
        x = torch.relu(linear_forward(self.fc2, x))
        return linear_forward(self.fc3, x)


def apply_deltas(boxes: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    cx = boxes[:, 0] + deltas[:, 0] * boxes[:, 2]
    cy = boxes[:, 1] + deltas[:, 1] * boxes[:, 3]
    w = boxes[:, 2] * torch.exp(deltas[:, 2])
    h = boxes[:, 3] * torch.exp(deltas[:, 3])
    return torch.stack([cx, cy, w, h], dim=-1)


class WeightAttention(nn.Module):
    """Multi-head weight attention.

    Head ``i`` projects both sides with the same map ``lin_i``;
    ``S_i = norm(lin_i(Q)) norm(lin_i(K))^T`` and ``W_i = lin_i(Q) lin_i(K)^T``.
    ``S = max(0, mean_i S_i)``, ``W = mean_i W_i``.
    """

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.proj = _linear(d_model, heads * self.d_head)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return linear_forward(self.proj, x).reshape(x.shape[0], self.heads, self.d_head).transpose(0, 1)

    def forward(self, Q: torch.Tensor, K: torch.Tensor) -> SimPair:
        if Q.shape[-1] != K.shape[-1]:
            raise ShapeError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
        pq, pk = self.project(Q), self.project(K)
        return weight_scores(pq, pk)


def weight_scores(pq: torch.Tensor, pk: torch.Tensor) -> SimPair:
    """Combine per-head projections ``(h, M, d)`` and ``(h, N, d)`` into a SimPair."""
    nq = pq / pq.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    nk = pk / pk.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    S = torch.clamp((nq @ nk.transpose(1, 2)).mean(dim=0), min=0.0)
    W = (pq @ pk.transpose(1, 2)).mean(dim=0)
    return SimPair(S, W)


@dataclass
class LayerOutput:
    queries: torch.Tensor
    temporal: SimPair
    spatial: SimPair
    boxes: torch.Tensor  # refined boxes, differentiable wrt the refine head


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sample = SampleAttention(cfg.d_model, cfg.d_feat, cfg.heads, cfg.points)
        self.ffn = FeedForward(cfg.d_model, cfg.hidden)
        self.refine = RefineHead(cfg.d_model, cfg.d_model)


class SimDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        self.score_embed = _linear(1, self.cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(self.cfg) for _ in range(self.cfg.num_layers))
        # one instance serves spatial, temporal and cross-clip roles
        self.weight_attn = WeightAttention(self.cfg.d_model, self.cfg.heads)

    def encode(self, boxes: np.ndarray, scores: np.ndarray) -> torch.Tensor:
        pos = torch.as_tensor(encode_boxes(boxes, self.cfg.d_model), dtype=DTYPE)
        s = torch.as_tensor(np.asarray(scores, dtype=np.float64).reshape(-1, 1), dtype=DTYPE)
        return pos + linear_forward(self.score_embed, s)

    def object_queries(self, boxes, scores, gt_ids=None) -> QuerySet:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return QuerySet(self.encode(boxes, scores), boxes, scores, list(gt_ids or []))

    def forward(self, objects: QuerySet, tracks: QuerySet, grid: FeatureGrid,
                refine: bool = True, detach_ref: bool = True) -> list[LayerOutput]:
        return decoder_forward(objects, tracks, grid, self, refine=refine, detach_ref=detach_ref)


def decoder_forward(objects: QuerySet, tracks: QuerySet, grid: FeatureGrid,
                    model: SimDecoder, refine: bool = True, detach_ref: bool = True) -> list[LayerOutput]:
    """Run every layer and keep all outputs for the auxiliary losses.

    Refined boxes become the next layer's sampling reference. They are detached
    there by default; ``detach_ref=False`` keeps that path so finite-difference
    checks see the same function autograd differentiates.
    """
    d = model.cfg.d_model
    if objects.queries.shape[-1] != d or tracks.queries.shape[-1] != d:
        raise ShapeError(f"queries must have {d} columns")
    if grid.d_feat != model.cfg.d_feat:
        raise ShapeError(f"grid has {grid.d_feat} channels, model expects {model.cfg.d_feat}")
    g = grid.tensor()
    q = objects.queries
    ref = torch.as_tensor(objects.boxes, dtype=DTYPE)
    outputs = []
    for layer in model.layers:
        q = layer.ffn(layer.sample(q, ref, g))
        if refine and len(q):
            boxes = apply_deltas(ref, layer.refine(q))
        else:
            boxes = ref
        temporal = model.weight_attn(q, tracks.queries)
        spatial = model.weight_attn(q, q)
        for pair in (temporal, spatial):
            if pair.S.numel() and not (0.0 <= float(pair.S.detach().min()) and float(pair.S.detach().max()) <= 1.0 + 1e-12):
                raise NumericError("similarity left [0, 1]")
        outputs.append(LayerOutput(q, temporal, spatial, boxes))
        ref = boxes.detach() if detach_ref else boxes
    return outputs


def refine_boxes(queries: QuerySet, head: RefineHead) -> torch.Tensor:
    """Per-query ``(dcx, dcy, dlog_w, dlog_h)`` deltas."""
    if len(queries) == 0:
        raise ShapeError("refine_boxes needs at least one query")
    return head(queries.queries)


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-5,
               n_coords: int = 200, rng: Optional[np.random.Generator] = None,
               floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``f`` re-evaluates a scalar from the current values of ``params``. At most
    ``n_coords`` coordinates are sampled (all of them if fewer exist). The
    error per coordinate is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``;
    scaling the floor with the objective keeps the measure invariant when
    ``f`` is multiplied by a constant.
    """
    rng = rng or np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    value = f()
    if not torch.isfinite(value):
        raise NumericError(f"non-finite objective {value.item()}")
    value.backward()
    floor = floor * max(1.0, abs(value.item()))
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    for p in params:
        p.grad = None

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in pick]

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = f().item()
            flat[j] = orig - eps
            lo = f().item()
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite objective under perturbation")
            num = (hi - lo) / (2 * eps)
            a = analytic[i].view(-1)[j].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
