"""Motion-prior baseline: greedy IoU association against last-seen boxes.

Kept out of ``assoc`` so the learned tracker never depends on box overlap.
"""

from __future__ import annotations

import numpy as np

from .assoc import TrackRow
from .geometry import BBox, iou_matrix


def iou_track_sequence(frames, iou_thr: float = 0.3, max_misses: int = 30) -> list[TrackRow]:
    """``frames`` yields ``(boxes, scores, ...)``; grids are ignored."""
    tracks: list[dict] = []
    next_id = 1
    rows = []
    for t, frame in enumerate(frames):
        boxes = np.asarray(frame[0], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(frame[1], dtype=np.float64).reshape(-1)
        matched_d, matched_t = set(), set()
        if tracks and len(boxes):
            ious = iou_matrix(boxes, np.stack([tr["box"] for tr in tracks]))
            for flat in np.argsort(-ious, axis=None, kind="stable"):
                d, k = divmod(int(flat), ious.shape[1])
                if ious[d, k] < iou_thr:
                    break
                if d in matched_d or k in matched_t:
                    continue
                matched_d.add(d)
                matched_t.add(k)
                tracks[k].update(box=boxes[d], misses=0)
                rows.append(TrackRow(t, tracks[k]["id"], BBox.from_array(boxes[d]), float(scores[d])))
        for k, tr in enumerate(tracks):
            if k not in matched_t:
                tr["misses"] += 1
        tracks = [tr for tr in tracks if tr["misses"] <= max_misses]
        for d in range(len(boxes)):
            if d not in matched_d:
                tracks.append({"id": next_id, "box": boxes[d], "misses": 0})
                rows.append(TrackRow(t, next_id, BBox.from_array(boxes[d]), float(scores[d])))
                next_id += 1
    return sorted(rows, key=lambda r: (r.frame, r.id))
