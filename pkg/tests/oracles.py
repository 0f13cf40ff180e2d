"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import numpy as np


def brute_force_assignment(S, maximize=True):
    """Exhaustive search over injections of the shorter side.

    Candidates are visited in lexicographic order of the partner sequence and
    only a strictly better total replaces the incumbent, so ties resolve to the
    lexicographically smallest sequence.
    """
    S = np.asarray(S, dtype=np.float64)
    m, n = S.shape
    if m == 0 or n == 0:
        return [], 0.0
    sign = 1.0 if maximize else -1.0
    best, best_pairs = -math.inf, None
    if m <= n:
        for cols in itertools.permutations(range(n), m):
            total = sum(S[r, c] for r, c in enumerate(cols))
            if sign * total > best:
                best, best_pairs = sign * total, [(r, c) for r, c in enumerate(cols)]
    else:
        for rows in itertools.permutations(range(m), n):
            total = sum(S[r, c] for c, r in enumerate(rows))
            if sign * total > best:
                best, best_pairs = sign * total, sorted((r, c) for c, r in enumerate(rows))
    return best_pairs, sign * best


def naive_embed_loss(W, mask):
    W = np.asarray(W, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    rows = []
    for r in range(W.shape[0]):
        terms = []
        for p in range(W.shape[1]):
            if not mask[r, p]:
                continue
            for q in range(W.shape[1]):
                if mask[r, q]:
                    continue
                terms.append(math.exp(W[r, q] - W[r, p]))
        rows.append(math.log1p(math.fsum(terms)))
    return math.fsum(rows)


def naive_focal(S, mask, gamma):
    total = 0.0
    for s, m in zip(np.ravel(S), np.ravel(mask)):
        if m:
            total -= (1 - s) ** gamma * math.log(max(s, 1e-12))
        else:
            total -= s ** gamma * math.log(max(1 - s, 1e-12))
    return total


def rect_iou(a, b):
    """IoU of center-size boxes by explicit corner arithmetic."""
    al, at, ar, ab = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bl, bt, br, bb = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ar, br) - max(al, bl))
    ih = max(0.0, min(ab, bb) - max(at, bt))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_force_idf1(pred, gt, iou_thr=0.5):
    """IDF1 by enumerating every partial matching between trajectories."""
    gt_ids = sorted({r[1] for r in gt})
    pr_ids = sorted({r[1] for r in pred})
    by_frame_gt, by_frame_pr = {}, {}
    for f, i, b, *_ in gt:
        by_frame_gt.setdefault(f, []).append((i, b))
    for f, i, b, *_ in pred:
        by_frame_pr.setdefault(f, []).append((i, b))
    overlap = {}
    for f, gts in by_frame_gt.items():
        for gi, gb in gts:
            for pi, pb in by_frame_pr.get(f, []):
                if rect_iou(np.asarray(gb), np.asarray(pb)) >= iou_thr:
                    overlap[gi, pi] = overlap.get((gi, pi), 0) + 1
    best = 0
    k = max(len(gt_ids), len(pr_ids))
    padded_pr = pr_ids + [None] * (k - len(pr_ids))
    padded_gt = gt_ids + [None] * (k - len(gt_ids))
    for perm in itertools.permutations(padded_pr):
        total = sum(overlap.get((g, p), 0) for g, p in zip(padded_gt, perm) if g is not None and p is not None)
        best = max(best, total)
    n_gt, n_pr = len(gt), len(pred)
    denom = 2 * best + (n_pr - best) + (n_gt - best)
    return 2 * best / denom if denom else 1.0


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at numpy vector ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        g.flat[i] = (f(hi) - f(lo)) / (2 * eps)
    return g
