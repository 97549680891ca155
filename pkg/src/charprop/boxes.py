"""Axis-aligned boxes in continuous pixel coordinates.

A box ``(x, y, w, h)`` covers ``[x, x + w) x [y, y + h)``; pixel ``i`` spans
``[i, i + 1)``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @property
    def aspect(self) -> float:
        """Width over height."""
        return self.w / self.h

    def scaled(self, factor: float) -> BBox:
        return BBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor)


def _require_positive(*boxes: BBox) -> None:
    for b in boxes:
        if not (b.w > 0 and b.h > 0):
            raise ValueError(f"degenerate box {tuple(b)}")


def iou(a: BBox, b: BBox) -> float:
    _require_positive(a, b)
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of ``x, y, w, h`` rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def encode_regression(p: BBox, g: BBox) -> tuple[float, float, float, float]:
    """Regression targets that move box ``p`` onto box ``g``.

    Offsets are relative to the box origin and normalized by the source
    size; size changes are natural logs of the ratio.
    """
    _require_positive(p, g)
    return (
        (g.x - p.x) / p.w,
        (g.y - p.y) / p.h,
        math.log(g.w / p.w),
        math.log(g.h / p.h),
    )


def decode_regression(t, p: BBox) -> BBox:
    """Inverse of :func:`encode_regression`. Raises on non-finite targets."""
    _require_positive(p)
    tx, ty, tw, th = (float(v) for v in t)
    if not all(math.isfinite(v) for v in (tx, ty, tw, th)):
        raise ValueError(f"non-finite regression values {(tx, ty, tw, th)}")
    return BBox(p.x + tx * p.w, p.y + ty * p.h, p.w * math.exp(tw), p.h * math.exp(th))


def decode_regression_array(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode_regression` over (N, 4) arrays."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.stack(
            [
                p[:, 0] + t[:, 0] * p[:, 2],
                p[:, 1] + t[:, 1] * p[:, 3],
                p[:, 2] * np.exp(t[:, 2]),
                p[:, 3] * np.exp(t[:, 3]),
            ],
            axis=1,
        )


def expand_to_aspect(b: BBox, aspect: float = 1.0) -> BBox:
    """Grow the shorter side symmetrically until ``w / h == aspect``."""
    _require_positive(b)
    cx, cy = b.center
    if b.w / b.h < aspect:
        w, h = b.h * aspect, b.h
    else:
        w, h = b.w, b.w / aspect
    return BBox(cx - w / 2, cy - h / 2, w, h)
