"""IDF1 / MOTA scoring and similarity-structure diagnostics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assoc import hungarian
from .geometry import iou_matrix


class MalformedTable(ValueError):
    pass


class UndefinedMargin(ValueError):
    pass


@dataclass
class EvalReport:
    idf1: float
    mota: float
    id_switches: int
    fp: int
    fn: int
    gt_count: int
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    per_sequence: dict = field(default_factory=dict)

    FIELDS = ("idf1", "mota", "id_switches", "fp", "fn", "gt_count", "idtp", "idfp", "idfn")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def format(self) -> str:
        lines = [f"{'sequence':<16}" + "".join(f"{k:>12}" for k in self.FIELDS)]
        for name, rep in list(self.per_sequence.items()) + [("OVERALL", self)]:
            cells = []
            for k in self.FIELDS:
                v = getattr(rep, k)
                cells.append(f"{v:>12.6f}" if isinstance(v, float) else f"{v:>12d}")
            lines.append(f"{name:<16}" + "".join(cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["sequence," + ",".join(self.FIELDS)]
        for name, rep in list(self.per_sequence.items()) + [("OVERALL", self)]:
            vals = [f"{getattr(rep, k):.6f}" if isinstance(getattr(rep, k), float) else str(getattr(rep, k))
                    for k in self.FIELDS]
            out.append(f"{name}," + ",".join(vals))
        return "\n".join(out) + "\n"


def _by_frame(table) -> dict:
    """``{frame: (ids, boxes)}``; rows are ``(frame, id, box, ...)`` with a
    center-size box as ``BBox`` or 4-sequence."""
    frames = defaultdict(list)
    seen = set()
    for row in table:
        frame, tid, box = int(row[0]), int(row[1]), row[2]
        if (frame, tid) in seen:
            raise MalformedTable(f"duplicate row for frame {frame}, id {tid}")
        seen.add((frame, tid))
        arr = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
        frames[frame].append((tid, arr))
    return {f: (np.array([r[0] for r in rows]), np.array([r[1] for r in rows]).reshape(-1, 4))
            for f, rows in frames.items()}


def _idf1_counts(gt, pred, iou_thr):
    """Per-(gt id, pred id) count of frames where both exist and overlap."""
    gt_ids = sorted({int(i) for ids, _ in gt.values() for i in ids})
    pr_ids = sorted({int(i) for ids, _ in pred.values() for i in ids})
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    for f, (gids, gboxes) in gt.items():
        if f not in pred:
            continue
        pids, pboxes = pred[f]
        ok = iou_matrix(gboxes, pboxes) >= iou_thr
        for a, b in zip(*np.nonzero(ok)):
            overlap[gi[int(gids[a])], pi[int(pids[b])]] += 1
    return overlap


def idf1_from_overlap(overlap: np.ndarray, n_gt: int, n_pred: int) -> tuple[float, int, int, int]:
    if overlap.size:
        pairs = hungarian(overlap.astype(np.float64), maximize=True)
        idtp = int(sum(overlap[r, c] for r, c in pairs))
    else:
        idtp = 0
    idfp, idfn = n_pred - idtp, n_gt - idtp
    denom = 2 * idtp + idfp + idfn
    return (2 * idtp / denom if denom else 1.0), idtp, idfp, idfn


def evaluate(pred, gt, iou_thr: float = 0.5) -> EvalReport:
    """Score one sequence. Tables are iterables of ``(frame, id, box, ...)``."""
    P, G = _by_frame(pred), _by_frame(gt)
    n_gt = sum(len(ids) for ids, _ in G.values())
    n_pred = sum(len(ids) for ids, _ in P.values())

    fp = fn = switches = matched_total = 0
    last_match: dict[int, int] = {}  # gt id -> pred id it was last matched to
    for f in sorted(set(P) | set(G)):
        gids, gboxes = G.get(f, (np.zeros(0, dtype=np.int64), np.zeros((0, 4))))
        pids, pboxes = P.get(f, (np.zeros(0, dtype=np.int64), np.zeros((0, 4))))
        ious = iou_matrix(gboxes, pboxes) if len(gids) and len(pids) else np.zeros((len(gids), len(pids)))
        pairs = []
        used_g, used_p = set(), set()
        # keep last frame's correspondences while they still overlap
        pidx = {int(p): k for k, p in enumerate(pids)}
        for a, g in enumerate(gids):
            p = last_match.get(int(g))
            b = pidx.get(p) if p is not None else None
            if b is not None and b not in used_p and ious[a, b] >= iou_thr:
                pairs.append((a, b))
                used_g.add(a)
                used_p.add(b)
        rest_g = [a for a in range(len(gids)) if a not in used_g]
        rest_p = [b for b in range(len(pids)) if b not in used_p]
        if rest_g and rest_p:
            sub = ious[np.ix_(rest_g, rest_p)]
            gated = np.where(sub >= iou_thr, sub, 0.0)
            for r, c in hungarian(gated, maximize=True):
                if sub[r, c] >= iou_thr:
                    pairs.append((rest_g[r], rest_p[c]))
        for a, b in pairs:
            g, p = int(gids[a]), int(pids[b])
            if g in last_match and last_match[g] != p:
                switches += 1
            last_match[g] = p
        matched_total += len(pairs)
        fn += len(gids) - len(pairs)
        fp += len(pids) - len(pairs)

    overlap = _idf1_counts(G, P, iou_thr)
    idf1, idtp, idfp, idfn = idf1_from_overlap(overlap, n_gt, n_pred)
    mota = 1.0 - (fn + fp + switches) / n_gt if n_gt else 1.0
    return EvalReport(float(idf1), float(mota), switches, fp, fn, n_gt, idtp, idfp, idfn)


def evaluate_many(pairs: dict, iou_thr: float = 0.5) -> EvalReport:
    """Aggregate over ``{name: (pred, gt)}``; overall IDF1/MOTA pool the counts."""
    per = {name: evaluate(p, g, iou_thr) for name, (p, g) in pairs.items()}
    tot = lambda k: sum(getattr(r, k) for r in per.values())
    idtp, idfp, idfn = tot("idtp"), tot("idfp"), tot("idfn")
    n_gt = tot("gt_count")
    denom = 2 * idtp + idfp + idfn
    idf1 = 2 * idtp / denom if denom else 1.0
    mota = 1.0 - (tot("fn") + tot("fp") + tot("id_switches")) / n_gt if n_gt else 1.0
    return EvalReport(float(idf1), float(mota), tot("id_switches"), tot("fp"), tot("fn"), n_gt,
                      idtp, idfp, idfn, per)


def similarity_margin(S, mask, exclude_diagonal: bool = False) -> tuple[float, float, float]:
    """Mean similarity over positive pairs, over negative pairs, and their gap."""
    S = np.asarray(S, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    valid = np.ones_like(mask)
    if exclude_diagonal and S.shape[0] == S.shape[1]:
        np.fill_diagonal(valid, False)
    pos, neg = mask & valid, ~mask & valid
    if not pos.any() or not neg.any():
        raise UndefinedMargin("mask needs both positive and negative pairs")
    mp, mn = float(S[pos].mean()), float(S[neg].mean())
    return mp, mn, mp - mn
