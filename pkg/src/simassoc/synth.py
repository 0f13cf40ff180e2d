"""Synthetic scenes: identity-bearing boxes moving over a feature grid.

Each identity owns a fixed appearance vector that is painted directly into
the grid cells its box covers, so the only thing left to learn is the
association itself. Three independent RNG streams (appearance + motion,
rendering noise, detection noise) keep decimated and full-rate scenes
aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ConfigError
from .net import FeatureGrid

MOTIONS = ("constant", "random_walk", "bounce")


@dataclass
class SceneConfig:
    num_objects: int = 8
    d_feat: int = 8
    frame_count: int = 20
    motion: str = "mixed"  # one of MOTIONS, or "mixed" for a per-object draw
    speed: float = 0.02  # mean displacement per raw frame, frame units
    delta_app: float = 2.4
    app_norm: float = 2.0  # appearance vectors live on this sphere; 0 keeps raw Gaussian draws
    occlusion: bool = True
    fps_decimation: int = 1
    sigma_feat: float = 0.1
    p_fn: float = 0.0
    p_fp: float = 0.0
    sigma_box: float = 0.0
    grid_size: int = 32
    min_size: float = 0.2
    max_size: float = 0.3
    min_visibility: float = 0.5
    fp_score_range: tuple = (0.05, 0.3)  # below every real score, since those are >= 0.7 * min_visibility

    def validate(self) -> "SceneConfig":
        if not (0 <= self.p_fn <= 1 and 0 <= self.p_fp <= 1):
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.delta_app <= 0:
            raise ConfigError("delta_app must be positive")
        if self.app_norm < 0:
            raise ConfigError("app_norm must be non-negative")
        lo, hi = self.fp_score_range
        if not (0 <= lo <= hi <= 1) or not (0 <= self.min_visibility <= 1):
            raise ConfigError("fp_score_range and min_visibility must lie in [0, 1]")
        if self.fps_decimation < 1:
            raise ConfigError("fps_decimation must be >= 1")
        if self.motion != "mixed" and self.motion not in MOTIONS:
            raise ConfigError(f"unknown motion model {self.motion!r}")
        if self.num_objects < 0 or self.frame_count < 1 or self.grid_size < 2:
            raise ConfigError("scene sizes out of range")
        if not (0 < self.min_size <= self.max_size < 1):
            raise ConfigError("box size range must satisfy 0 < min <= max < 1")
        return self


@dataclass
class FrameGT:
    boxes: np.ndarray  # (n, 4) center-size
    ids: np.ndarray  # (n,) identities, 1-based
    visibility: np.ndarray  # (n,)
    depth: np.ndarray  # (n,) smaller is closer to the camera

    def visible(self, min_visibility: float) -> "FrameGT":
        keep = self.visibility >= min_visibility
        return FrameGT(self.boxes[keep], self.ids[keep], self.visibility[keep], self.depth[keep])


@dataclass
class GtSequence:
    frames: list
    grids: list
    appearance: np.ndarray  # (num_objects, d_feat), row k belongs to identity k + 1
    config: SceneConfig = field(default_factory=SceneConfig)


def _streams(seed: int):
    root = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in root.spawn(3)]


def sample_appearance(n: int, d: int, delta: float, rng: np.random.Generator,
                      max_draws: int = 10_000, norm: float = 0.0) -> np.ndarray:
    out: list[np.ndarray] = []
    draws = 0
    while len(out) < n:
        if draws >= max_draws:
            raise ConfigError(f"could not place {n} appearance vectors {delta} apart in {d} dims")
        v = rng.standard_normal(d)
        if norm > 0:
            v *= norm / np.linalg.norm(v)
        draws += 1
        if all(np.linalg.norm(v - u) >= delta for u in out):
            out.append(v)
    return np.array(out).reshape(n, d)


def _trajectories(cfg: SceneConfig, rng: np.random.Generator, raw_frames: int):
    n = cfg.num_objects
    size = rng.uniform(cfg.min_size, cfg.max_size, size=(n, 2))
    lo, hi = size / 2, 1 - size / 2
    pos = rng.uniform(lo, hi)
    ang = rng.uniform(0, 2 * np.pi, size=n)
    spd = cfg.speed * rng.uniform(0.5, 1.5, size=n)
    vel = np.stack([np.cos(ang), np.sin(ang)], axis=1) * spd[:, None]
    if cfg.motion == "mixed":
        kinds = rng.integers(0, len(MOTIONS), size=n)
    else:
        kinds = np.full(n, MOTIONS.index(cfg.motion))
    depth = rng.permutation(n).astype(np.float64)
    out = np.empty((raw_frames, n, 4))
    for t in range(raw_frames):
        out[t, :, :2] = pos
        out[t, :, 2:] = size
        kick = rng.standard_normal((n, 2)) * cfg.speed * 0.3
        walk = kinds == MOTIONS.index("random_walk")
        vel[walk] += kick[walk]
        pos = pos + vel
        stick = kinds == MOTIONS.index("constant")
        for axis in range(2):
            low, high = pos[:, axis] < lo[:, axis], pos[:, axis] > hi[:, axis]
            bounce = (low | high) & ~stick
            vel[bounce, axis] *= -1
            pos[:, axis] = np.where(low, 2 * lo[:, axis] - pos[:, axis], pos[:, axis])
            pos[:, axis] = np.where(high, 2 * hi[:, axis] - pos[:, axis], pos[:, axis])
            pos[:, axis] = np.clip(pos[:, axis], lo[:, axis], hi[:, axis])
    return out, depth


def _cell_centers(g: int):
    c = (np.arange(g) + 0.5) / g
    return np.meshgrid(c, c, indexing="xy")  # xs, ys of shape (g, g)


def _owner_map(boxes: np.ndarray, depth: np.ndarray, g: int, occlusion: bool) -> np.ndarray:
    """Index of the front-most box covering each cell center, -1 for background."""
    xs, ys = _cell_centers(g)
    owner = np.full((g, g), -1, dtype=np.int64)
    order = np.argsort(depth) if occlusion else np.arange(len(boxes))
    for k in order:
        cx, cy, w, h = boxes[k]
        inside = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
        take = inside & (owner < 0) if occlusion else inside
        owner[take] = k
    return owner


def _visibility(boxes: np.ndarray, depth: np.ndarray, occlusion: bool, res: int = 128) -> np.ndarray:
    if not occlusion or len(boxes) == 0:
        return np.ones(len(boxes))
    owner = _owner_map(boxes, depth, res, True)
    xs, ys = _cell_centers(res)
    vis = np.ones(len(boxes))
    for k, (cx, cy, w, h) in enumerate(boxes):
        inside = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
        total = inside.sum()
        if total:
            vis[k] = (owner[inside] == k).sum() / total
    return vis


def generate_sequence(cfg: SceneConfig, seed: int) -> GtSequence:
    cfg.validate()
    rng_world, rng_render, _ = _streams(seed)
    appearance = sample_appearance(cfg.num_objects, cfg.d_feat, cfg.delta_app, rng_world, norm=cfg.app_norm)
    k = cfg.fps_decimation
    raw, depth = _trajectories(cfg, rng_world, cfg.frame_count * k)
    frames, grids = [], []
    ids = np.arange(1, cfg.num_objects + 1)
    for t in range(0, cfg.frame_count * k, k):
        boxes = raw[t].copy()
        vis = _visibility(boxes, depth, cfg.occlusion)
        frame = FrameGT(boxes, ids.copy(), vis, depth.copy())
        frames.append(frame)
        grids.append(render_grid(frame, appearance, cfg, rng_render))
    return GtSequence(frames, grids, appearance, cfg)


def render_grid(frame: FrameGT, appearance: np.ndarray, cfg: SceneConfig,
                rng: np.random.Generator | None = None) -> FeatureGrid:
    g = cfg.grid_size
    owner = _owner_map(frame.boxes, frame.depth, g, cfg.occlusion)
    data = np.zeros((g, g, cfg.d_feat))
    fg = owner >= 0
    data[fg] = appearance[frame.ids[owner[fg]] - 1]
    if cfg.sigma_feat > 0:
        rng = rng or np.random.default_rng(0)
        data += rng.normal(0.0, cfg.sigma_feat, size=data.shape)
    return FeatureGrid(data)


@dataclass
class DetectionFrame:
    boxes: np.ndarray  # (m, 4)
    scores: np.ndarray  # (m,)


def simulate_detections(frame: FrameGT, cfg: SceneConfig, rng: np.random.Generator) -> DetectionFrame:
    vis = frame.visible(cfg.min_visibility)
    keep = rng.random(len(vis.boxes)) >= cfg.p_fn
    boxes = vis.boxes[keep].copy()
    if cfg.sigma_box > 0 and len(boxes):
        boxes = boxes + rng.normal(0.0, cfg.sigma_box, size=boxes.shape)
    boxes[:, 2:] = np.maximum(boxes[:, 2:], 0.01)
    scores = vis.visibility[keep] * (1 - rng.uniform(0.0, 0.3, size=len(boxes)))
    n_fp = rng.poisson(cfg.p_fp * cfg.num_objects)
    if n_fp:
        size = rng.uniform(cfg.min_size, cfg.max_size, size=(n_fp, 2))
        ctr = rng.uniform(size / 2, 1 - size / 2)
        boxes = np.concatenate([boxes, np.concatenate([ctr, size], axis=1)])
        scores = np.concatenate([scores, rng.uniform(*cfg.fp_score_range, size=n_fp)])
    return DetectionFrame(boxes.reshape(-1, 4), np.clip(scores, 0.0, 1.0))


@dataclass
class SyntheticSequence:
    gt: GtSequence
    detections: list

    def gt_frames(self) -> list[FrameGT]:
        """Ground truth restricted to sufficiently visible objects."""
        return [f.visible(self.gt.config.min_visibility) for f in self.gt.frames]

    def frames(self):
        """``(boxes, scores, grid)`` triples for the tracker."""
        return [(d.boxes, d.scores, g) for d, g in zip(self.detections, self.gt.grids)]


def make_sequence(cfg: SceneConfig, seed: int) -> SyntheticSequence:
    gt = generate_sequence(cfg, seed)
    rng = _streams(seed)[2]
    return SyntheticSequence(gt, [simulate_detections(f, cfg, rng) for f in gt.frames])


def make_dataset(cfg: SceneConfig, count: int, seed: int) -> list[SyntheticSequence]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_sequence(cfg, int(s)) for s in seeds]
