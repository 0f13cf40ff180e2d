"""Boxes, overlap measures and the sine-cosine query encoding.

Boxes are normalized center-size ``(cx, cy, w, h)`` in frame units. Pixel
left-top-width-height only appears at file boundaries (see ``simassoc.io``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TEMPERATURE = 20.0
POSITION_SCALE = 2 * np.pi  # normalized coordinates span one full period at the lowest frequency


class GeometryError(ValueError):
    """Degenerate box (non-positive width or height)."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_ltrb(cls, l, t, r, b) -> "BBox":
        return cls((l + r) / 2, (t + b) / 2, r - l, b - t)

    def ltrb(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def validate(self) -> "BBox":
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"degenerate box {self}")
        return self


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    frame_index: int = 0


def _area_terms(a: BBox, b: BBox):
    a.validate()
    b.validate()
    al, at, ar, ab = a.ltrb()
    bl, bt, br, bb = b.ltrb()
    iw = max(0.0, min(ar, br) - max(al, bl))
    ih = max(0.0, min(ab, bb) - max(at, bt))
    inter = iw * ih
    # areas from the same corner arithmetic so identical boxes give IoU exactly 1
    union = (ar - al) * (ab - at) + (br - bl) * (bb - bt) - inter
    hull = (max(ar, br) - min(al, bl)) * (max(ab, bb) - min(at, bt))
    return inter, union, hull


def iou(a: BBox, b: BBox) -> float:
    inter, union, _ = _area_terms(a, b)
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    inter, union, hull = _area_terms(a, b)
    return inter / union - max(hull - union, 0.0) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` arrays of center-size boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any() or (b[:, 2:] <= 0).any():
        raise GeometryError("degenerate box in iou_matrix")
    a_lt, a_rb = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b_lt, b_rb = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a_rb, b_rb) - np.maximum(a_lt, b_lt), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def encode_query(det: Detection | BBox, d_model: int) -> np.ndarray:
    """Sine-cosine encoding of a box; the score embedding is added by the model.

    Each of ``cx, cy, w, h`` gets ``d_model / 4`` channels, laid out as
    interleaved ``(sin, cos)`` pairs over a geometric frequency schedule.
    """
    box = det.bbox if isinstance(det, Detection) else det
    return encode_boxes(box.as_array()[None, :], d_model)[0]


def encode_boxes(boxes: np.ndarray, d_model: int) -> np.ndarray:
    if d_model <= 0 or d_model % 8:
        raise ConfigError(f"d_model must be a positive multiple of 8, got {d_model}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    per = d_model // 4
    i = np.arange(per // 2, dtype=np.float64)
    freq = TEMPERATURE ** (2 * i / per)
    # (n, 4, per/2)
    arg = POSITION_SCALE * boxes[:, :, None] / freq[None, None, :]
    out = np.empty((boxes.shape[0], 4, per), dtype=np.float64)
    out[:, :, 0::2] = np.sin(arg)
    out[:, :, 1::2] = np.cos(arg)
    return out.reshape(boxes.shape[0], d_model)
