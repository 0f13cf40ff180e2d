"""Assignment and the online tracker.

Matching uses only the decoder's temporal similarity. There is no motion
model and no box-overlap term anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .geometry import BBox, ConfigError
from .net import FeatureGrid, NumericError, QuerySet, SimDecoder


def _lap_min(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian for a square cost matrix.

    Returns ``(row_to_col, u, v)`` with dual potentials such that
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on the assignment.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0] - u[i0] - v
            free = ~used
            free[0] = False
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_optimum(cost: np.ndarray, row_to_col: np.ndarray, u, v, n_real: int) -> np.ndarray:
    """Among optimal assignments, pick the one with lexicographically smallest
    column sequence over the first ``n_real`` rows.

    Every optimal assignment lives on the tight edges of any optimal dual, so
    this only walks alternating paths in the tight subgraph.
    """
    n = cost.shape[0]
    tol = 1e-9 * (1.0 + np.abs(cost).max(initial=0.0))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    tight_cols = [np.flatnonzero(tight[r]) for r in range(n)]
    match_row = row_to_col.copy()
    match_col = np.empty(n, dtype=np.int64)
    match_col[match_row] = np.arange(n)

    for i in range(n_real):
        target = match_row[i]
        for j in tight_cols[i]:
            if j >= target:
                break
            r = match_col[j]
            if r <= i:
                continue
            path = _augment(r, target, j, i, tight_cols, match_col, set())
            if path is not None:
                for row, col in path:
                    match_row[row] = col
                    match_col[col] = row
                match_row[i] = j
                match_col[j] = i
                break
    return match_row


def _augment(r, target, banned, fixed_upto, tight_cols, match_col, seen):
    """Alternating path moving row ``r`` onto free column ``target``; rows
    ``<= fixed_upto`` stay put. Returns the (row, new_col) reassignments."""
    for c in tight_cols[r]:
        if c == banned or c in seen:
            continue
        seen.add(c)
        if c == target:
            return [(r, c)]
        r2 = match_col[c]
        if r2 <= fixed_upto:
            continue
        rest = _augment(r2, target, banned, fixed_upto, tight_cols, match_col, seen)
        if rest is not None:
            return [(r, c)] + rest
    return None


def hungarian(S: np.ndarray, maximize: bool = True) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment of ``min(M, N)`` pairs.

    Ties resolve deterministically: among optimal assignments the one whose
    partner sequence, read along the shorter side in index order, is
    lexicographically smallest wins.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("hungarian expects a 2-D matrix")
    if not np.isfinite(S).all():
        raise NumericError("non-finite entry in assignment matrix")
    m, n = S.shape
    if m == 0 or n == 0:
        return []
    transposed = m > n
    cost = -S if maximize else S.copy()
    if transposed:
        cost = cost.T
    short, long_ = cost.shape
    square = np.zeros((long_, long_))
    square[:short] = cost
    row_to_col, u, v = _lap_min(square)
    row_to_col = _lexicographic_optimum(square, row_to_col, u, v, short)
    pairs = [(int(r), int(row_to_col[r])) for r in range(short)]
    if transposed:
        pairs = sorted((c, r) for r, c in pairs)
    return pairs


@dataclass
class MatchConfig:
    tau_high: float = 0.5
    s_min: float = 0.3
    max_misses: int = 30
    init_all: bool = True

    def validate(self) -> "MatchConfig":
        if not (0 <= self.s_min <= 1 and 0 <= self.tau_high <= 1 and self.max_misses >= 0):
            raise ConfigError(f"invalid match config {self}")
        return self


def two_stage_match(S: np.ndarray, det_scores: Sequence[float], cfg: MatchConfig):
    """High-score detections claim tracks first, the rest compete for leftovers.

    Returns ``(matches, unmatched_dets, unmatched_tracks)``; matches are
    ``(det, track)`` index pairs.
    """
    S = np.asarray(S, dtype=np.float64)
    scores = np.asarray(det_scores, dtype=np.float64)
    m = len(scores)
    n = S.shape[1] if S.ndim == 2 else 0
    S = S.reshape(m, n)
    matches = []
    free_tracks = list(range(n))
    stage1 = [i for i in range(m) if scores[i] >= cfg.tau_high]
    for rows in (stage1, None):
        if rows is None:
            matched = {d for d, _ in matches}
            rows = [i for i in range(m) if i not in matched]
        if not rows or not free_tracks:
            continue
        sub = S[np.ix_(rows, free_tracks)]
        taken = set()
        for r, c in hungarian(sub, maximize=True):
            if sub[r, c] >= cfg.s_min:
                matches.append((rows[r], free_tracks[c]))
                taken.add(c)
        free_tracks = [t for k, t in enumerate(free_tracks) if k not in taken]
    matched_dets = {d for d, _ in matches}
    unmatched_dets = [i for i in range(m) if i not in matched_dets]
    return sorted(matches), unmatched_dets, free_tracks


@dataclass
class Track:
    id: int
    query: torch.Tensor
    last_box: np.ndarray
    last_score: float
    age: int = 0
    misses: int = 0
    gt_id: Optional[int] = None


@dataclass
class TrackerState:
    config: MatchConfig = field(default_factory=MatchConfig)
    tracks: list = field(default_factory=list)
    next_id: int = 1
    frame: int = 0

    def track_queries(self, d_model: int) -> QuerySet:
        if not self.tracks:
            return QuerySet.empty(d_model)
        return QuerySet(
            torch.stack([t.query for t in self.tracks]),
            np.stack([t.last_box for t in self.tracks]),
            np.array([t.last_score for t in self.tracks]),
            [t.gt_id for t in self.tracks],
            [t.id for t in self.tracks],
        )


class TrackRow(NamedTuple):
    frame: int
    id: int
    box: BBox
    score: float


def update_tracks(state: TrackerState, objects: QuerySet, out_queries: torch.Tensor, S: np.ndarray):
    """Match, replace matched track queries, birth new tracks, age and retire.

    Shared by inference and training so both follow one code path. Returns
    ``(assigned, matches)`` where ``assigned[i]`` is the track id given to
    detection ``i`` (``None`` if it neither matched nor started a track).
    """
    cfg = state.config
    matches, unmatched_dets, unmatched_tracks = two_stage_match(S, objects.scores, cfg)
    assigned: list[Optional[int]] = [None] * len(objects)
    for d, t in matches:
        tr = state.tracks[t]
        tr.query = out_queries[d]
        tr.last_box = objects.boxes[d]
        tr.last_score = float(objects.scores[d])
        tr.gt_id = objects.gt_ids[d]
        tr.misses = 0
        tr.age += 1
        assigned[d] = tr.id
    for t in unmatched_tracks:
        state.tracks[t].misses += 1
        state.tracks[t].age += 1
    state.tracks = [t for t in state.tracks if t.misses <= cfg.max_misses]
    for d in unmatched_dets:
        if cfg.init_all or objects.scores[d] >= cfg.tau_high:
            state.tracks.append(Track(state.next_id, out_queries[d], objects.boxes[d],
                                      float(objects.scores[d]), gt_id=objects.gt_ids[d]))
            assigned[d] = state.next_id
            state.next_id += 1
    return assigned, matches


def tracker_step(state: TrackerState, boxes: np.ndarray, scores: np.ndarray, grid: FeatureGrid,
                 model: SimDecoder) -> list[TrackRow]:
    """Advance the tracker by one frame of detections."""
    frame = state.frame
    state.frame += 1
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        update_tracks(state, QuerySet.empty(model.cfg.d_model), torch.zeros((0, model.cfg.d_model)),
                      np.zeros((0, len(state.tracks))))
        return []
    with torch.no_grad():
        objects = model.object_queries(boxes, scores)
        tracks = state.track_queries(model.cfg.d_model)
        final = model(objects, tracks, grid)[-1]
    assigned, _ = update_tracks(state, objects, final.queries, final.temporal.S.numpy())
    rows = [TrackRow(frame, tid, BBox.from_array(boxes[i]), float(scores[i]))
            for i, tid in enumerate(assigned) if tid is not None]
    return sorted(rows, key=lambda r: r.id)


def track_sequence(model: SimDecoder, frames: Iterable, cfg: MatchConfig | None = None) -> list[TrackRow]:
    """Fold ``tracker_step`` over ``(boxes, scores, grid)`` frames.

    Frame numbers in the output count from 0 in iteration order.
    """
    state = TrackerState((cfg or MatchConfig()).validate())
    rows: list[TrackRow] = []
    for boxes, scores, grid in frames:
        rows.extend(tracker_step(state, boxes, scores, grid, model))
    return sorted(rows, key=lambda r: (r.frame, r.id))
