"""Clip-based training with in-loop matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .assoc import MatchConfig, TrackerState, update_tracks
from .geometry import ConfigError, iou_matrix
from .io import CheckpointError, ShapeMismatchError, read_tensors, write_tensors
from .loss import (LossBreakdown, LossWeights, crossclip_loss, id_mask, refine_losses, self_mask,
                   spatial_loss, temporal_loss, total_loss)
from .net import DTYPE, FeatureGrid, ModelConfig, SimDecoder
from .synth import SyntheticSequence

log = logging.getLogger(__name__)


class SequenceTooShort(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    clip_len: int = 5
    interval_range: tuple = (0, 3)
    fixed_interval: Optional[int] = None  # extra frames skipped between clip frames
    assign_iou: float = 0.5
    tau_iou: float = 0.5
    epochs: int = 5
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 2
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clips_per_sequence: int = 1
    seed: int = 0
    # rotate feature channels by a random orthogonal matrix per clip; the
    # synthetic appearance and noise models are isotropic, so this draws fresh
    # identities from the same distribution
    rotate_features: bool = True

    def validate(self) -> "TrainConfig":
        lo, hi = self.interval_range
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2")
        if not (0 <= lo <= hi):
            raise ConfigError("interval_range must satisfy 0 <= lo <= hi")
        if not (0 <= self.assign_iou <= 1 and 0 <= self.tau_iou <= 1):
            raise ConfigError("IoU thresholds must lie in [0, 1]")
        if self.lr < 0 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigError("bad optimizer schedule")
        return self


@dataclass
class ClipFrame:
    grid: FeatureGrid
    boxes: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray
    gt_ids: np.ndarray


@dataclass
class Clip:
    frames: list
    indices: list = field(default_factory=list)


def sample_clip(seq: SyntheticSequence, cfg: TrainConfig, rng: np.random.Generator) -> Clip:
    n = cfg.clip_len
    total = len(seq.gt.frames)
    if total < n:
        raise SequenceTooShort(f"sequence has {total} frames, clip needs {n}")
    if cfg.fixed_interval is not None:
        gaps = np.full(n - 1, cfg.fixed_interval)
    else:
        lo, hi = cfg.interval_range
        gaps = rng.integers(lo, hi + 1, size=n - 1)
        if gaps.sum() + n > total:
            gaps = np.minimum(gaps, (total - n) // max(n - 1, 1))
    span = int(gaps.sum()) + n
    if span > total:
        raise SequenceTooShort(f"span {span} exceeds {total} frames")
    start = int(rng.integers(0, total - span + 1))
    idx = [start]
    for g in gaps:
        idx.append(idx[-1] + int(g) + 1)
    gt_frames = seq.gt_frames()
    frames = [ClipFrame(seq.gt.grids[i], seq.detections[i].boxes, seq.detections[i].scores,
                        gt_frames[i].boxes, gt_frames[i].ids) for i in idx]
    if cfg.rotate_features:
        q = _random_rotation(seq.gt.grids[0].d_feat, rng)
        for f in frames:
            f.grid = FeatureGrid(f.grid.data @ q)
    return Clip(frames, idx)


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def assign_gt(boxes: np.ndarray, gt_boxes: np.ndarray, gt_ids: Sequence, iou_thr: float = 0.5) -> list:
    """Greedy one-to-one labeling by descending IoU; pairs need IoU > ``iou_thr``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out: list = [None] * len(boxes)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return out
    ious = iou_matrix(boxes, gt_boxes)
    order = sorted(((-ious[i, j], i, j) for i in range(len(boxes)) for j in range(len(gt_boxes))
                    if ious[i, j] > iou_thr))
    used_d, used_g = set(), set()
    for _, i, j in order:
        if i in used_d or j in used_g:
            continue
        out[i] = int(gt_ids[j])
        used_d.add(i)
        used_g.add(j)
    return out


def filter_ambiguous(refined: np.ndarray, gt_for_query: Sequence, tau_iou: float) -> list[int]:
    """Indices of queries to keep.

    ``gt_for_query[i]`` is the ground-truth box of query ``i`` or ``None`` for
    false positives (always kept). Matched queries whose refined box falls
    below ``tau_iou`` IoU with their target are dropped.
    """
    refined = np.asarray(refined, dtype=np.float64).reshape(-1, 4)
    keep = []
    for i, g in enumerate(gt_for_query):
        if g is None:
            keep.append(i)
            continue
        box = refined[i]
        if box[2] <= 0 or box[3] <= 0:
            continue
        if iou_matrix(box, np.asarray(g))[0, 0] >= tau_iou:
            keep.append(i)
    return keep


def make_optimizer(model: SimDecoder, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def clip_loss(model: SimDecoder, clip: Clip, weights: LossWeights, cfg: TrainConfig,
              match_cfg: MatchConfig | None = None, keep_matrices: bool = False):
    """Run the decoder over a clip exactly as the tracker would and build Eq.-style losses.

    Returns ``(breakdown, extras)``; ``extras`` holds final-layer matrices
    and masks when ``keep_matrices`` is set.
    """
    state = TrackerState((match_cfg or MatchConfig()).validate())
    L = model.cfg.num_layers
    d = model.cfg.d_model
    spatial = [[] for _ in range(L)]
    temporal = [[] for _ in range(L)]
    buffer = [[] for _ in range(L)]
    buffer_ids: list[int] = []
    ref_pred = [[] for _ in range(L)]
    ref_gt: list[np.ndarray] = []
    extras = {"spatial": [], "temporal": []}

    for frame in clip.frames:
        ids = assign_gt(frame.boxes, frame.gt_boxes, frame.gt_ids, cfg.assign_iou)
        if len(frame.boxes) == 0:
            update_tracks(state, model.object_queries(frame.boxes, frame.scores), torch.zeros((0, d), dtype=DTYPE),
                          np.zeros((0, len(state.tracks))))
            continue
        objects = model.object_queries(frame.boxes, frame.scores, ids)
        tracks = state.track_queries(d)
        outs = model(objects, tracks, frame.grid)
        gt_lookup = {int(g): b for g, b in zip(frame.gt_ids, frame.gt_boxes)}
        targets = [gt_lookup[i] if i is not None else None for i in ids]
        keep = filter_ambiguous(outs[-1].boxes.detach().numpy(), targets, cfg.tau_iou)
        kept_ids = [ids[i] for i in keep]
        matched = [i for i in keep if ids[i] is not None]
        for l, out in enumerate(outs):
            sp = out.spatial
            sub = type(sp)(sp.S[keep][:, keep], sp.W[keep][:, keep])
            spatial[l].append((sub, self_mask(kept_ids)))
            if len(tracks):
                tp = out.temporal
                temporal[l].append((type(tp)(tp.S[keep], tp.W[keep]), id_mask(kept_ids, tracks.gt_ids)))
            if matched:
                buffer[l].append(out.queries[matched])
                ref_pred[l].append(out.boxes[matched])
        if matched:
            buffer_ids.extend(ids[i] for i in matched)
            ref_gt.append(np.stack([targets[i] for i in matched]))
        if keep_matrices:
            extras["spatial"].append(spatial[-1][-1])
            if len(tracks):
                extras["temporal"].append(temporal[-1][-1])
        update_tracks(state, objects, outs[-1].queries, outs[-1].temporal.S.detach().numpy())

    zero = torch.zeros((), dtype=DTYPE)
    sp_total, tp_total, cc_total, l1_total, g_total = zero, zero, zero, zero, zero
    gt_cat = torch.as_tensor(np.concatenate(ref_gt), dtype=DTYPE) if ref_gt else None
    cc_mask = id_mask(buffer_ids, buffer_ids)
    for l in range(L):
        sp_total = sp_total + spatial_loss(spatial[l], weights.gamma)
        tp_total = tp_total + temporal_loss(temporal[l], weights.gamma)
        if buffer[l]:
            Q = torch.cat(buffer[l])
            pair = model.weight_attn(Q, Q)
            cc_total = cc_total + crossclip_loss(pair, cc_mask, weights.gamma)
            l1, g = refine_losses(torch.cat(ref_pred[l]), gt_cat)
            l1_total, g_total = l1_total + l1, g_total + g
            if keep_matrices and l == L - 1:
                extras["crossclip"] = (pair, cc_mask)
    extras["buffer_ids"] = buffer_ids
    return total_loss(sp_total, tp_total, cc_total, l1_total, g_total, weights), extras


def train_step(model: SimDecoder, clip: Clip, weights: LossWeights, cfg: TrainConfig,
               optim: torch.optim.Optimizer, match_cfg: MatchConfig | None = None,
               dump_dir: Optional[Path] = None) -> LossBreakdown:
    optim.zero_grad(set_to_none=False)
    breakdown, _ = clip_loss(model, clip, weights, cfg, match_cfg)
    if not torch.isfinite(breakdown.total):
        diag = {"breakdown": breakdown.as_dict(), "clip_indices": clip.indices,
                "detections": [len(f.boxes) for f in clip.frames]}
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, optim, dump_dir / "nonfinite.ckpt")
            (dump_dir / "nonfinite.txt").write_text(repr(diag) + "\n")
        optim.zero_grad(set_to_none=False)
        raise NonFiniteLoss(f"non-finite loss {breakdown.as_dict()}", diag)
    if breakdown.total.requires_grad:
        breakdown.total.backward()
        optim.step()
    optim.zero_grad(set_to_none=False)
    return breakdown


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


def fit(model: SimDecoder, sequences: Sequence[SyntheticSequence], cfg: TrainConfig,
        weights: LossWeights | None = None, match_cfg: MatchConfig | None = None,
        on_step: Optional[Callable[[dict], None]] = None, dump_dir: Optional[Path] = None,
        optim: Optional[torch.optim.Optimizer] = None) -> list[dict]:
    """Train for ``cfg.epochs`` passes; each pass samples ``clips_per_sequence``
    clips from every sequence in shuffled order. Returns the per-step log."""
    cfg.validate()
    weights = (weights or LossWeights()).validate()
    rng = np.random.default_rng(cfg.seed)
    optim = optim or make_optimizer(model, cfg)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for group in optim.param_groups:
            group["lr"] = lr
        order = [k for k in rng.permutation(len(sequences)) for _ in range(cfg.clips_per_sequence)]
        for k in order:
            try:
                clip = sample_clip(sequences[k], cfg, rng)
            except SequenceTooShort:
                log.debug("skipping short sequence %d", k)
                continue
            b = train_step(model, clip, weights, cfg, optim, match_cfg, dump_dir)
            row = {"step": step, "epoch": epoch, **weighted_terms(b, weights), "lr": lr}
            history.append(row)
            if on_step:
                on_step(row)
            step += 1
    return history


def weighted_terms(b: LossBreakdown, w: LossWeights) -> dict:
    raw = {k: float(v) for k, v in b.as_dict().items()}
    out = {k: getattr(w, k) * raw[k] for k in ("spatial", "temporal", "crossclip", "l1", "giou")}
    out["total"] = raw["total"]
    return out


LOG_COLUMNS = ("step", "epoch", "spatial", "temporal", "crossclip", "l1", "giou", "total", "lr")


def format_log_row(row: dict) -> str:
    return ",".join(str(row[k]) if k in ("step", "epoch") else f"{row[k]:.8g}" for k in LOG_COLUMNS)


# -- checkpoints ---------------------------------------------------------------

_CONFIG_KEYS = ("d_model", "d_feat", "num_layers", "heads", "points", "hidden")


def _state_tensors(model: SimDecoder, optim: Optional[torch.optim.Optimizer]) -> dict:
    out = {f"config/{k}": np.array(float(getattr(model.cfg, k))) for k in _CONFIG_KEYS}
    for name, p in model.named_parameters():
        out[f"param/{name}"] = p.detach().numpy()
    if optim is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        group = optim.param_groups[0]
        out["optim/lr"] = np.array(float(group["lr"]))
        for p in group["params"]:
            st = optim.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"optim/{n}/step"] = np.array(float(st["step"]))
            out[f"optim/{n}/exp_avg"] = st["exp_avg"].detach().numpy()
            out[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return out


def save_checkpoint(model: SimDecoder, optim: Optional[torch.optim.Optimizer], path) -> None:
    write_tensors(path, _state_tensors(model, optim))


def load_checkpoint(path, train_cfg: TrainConfig | None = None):
    """Return ``(model, optim)``; ``optim`` is ``None`` if none was saved."""
    tensors = read_tensors(path)
    try:
        cfg = ModelConfig(**{k: int(tensors[f"config/{k}"].item()) for k in _CONFIG_KEYS})
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks model config entry {e}") from None
    model = SimDecoder(cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"param/{name}"
            if key not in tensors:
                raise ShapeMismatchError(f"checkpoint lacks parameter {name}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatchError(f"{name}: checkpoint {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=DTYPE))
    optim = None
    if "optim/lr" in tensors:
        optim = make_optimizer(model, train_cfg or TrainConfig())
        for group in optim.param_groups:
            group["lr"] = tensors["optim/lr"].item()
        for name, p in params.items():
            if f"optim/{name}/step" in tensors:
                optim.state[p] = {
                    "step": torch.tensor(tensors[f"optim/{name}/step"].item()),
                    "exp_avg": torch.as_tensor(tensors[f"optim/{name}/exp_avg"], dtype=DTYPE).clone(),
                    "exp_avg_sq": torch.as_tensor(tensors[f"optim/{name}/exp_avg_sq"], dtype=DTYPE).clone(),
                }
    return model, optim
