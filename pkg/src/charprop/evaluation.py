"""Recall of character proposals against ground-truth boxes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from charprop.boxes import BBox, iou, iou_matrix  # noqa: F401  (iou re-exported)
from charprop.inference import Proposal

DEFAULT_TOP_N_GRID = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)
DEFAULT_IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))


@dataclass(frozen=True)
class EvalResult:
    matched: int
    total: int
    iou_threshold: float
    top_n: int | None

    @property
    def recall(self) -> float:
        return self.matched / self.total


def _ranked_boxes(props: Sequence[Proposal], top_n: int | None) -> np.ndarray:
    order = np.argsort(-np.array([p.score for p in props], dtype=np.float64), kind="stable")
    if top_n is not None:
        order = order[:top_n]
    return np.array([tuple(props[i].box) for i in order], dtype=np.float64).reshape(-1, 4)


def _best_overlaps(proposals: Mapping[str, Sequence[Proposal]], truths: Mapping[str, Sequence[BBox]], top_n):
    """Per image, the best IoU each truth reaches among the top-n proposals."""
    for image_id in proposals:
        if image_id not in truths:
            raise KeyError(f"proposals reference unknown image {image_id!r}")
    best = []
    for image_id, boxes in truths.items():
        if not boxes:
            continue
        t = np.array([tuple(b) for b in boxes], dtype=np.float64)
        p = _ranked_boxes(proposals.get(image_id, ()), top_n)
        if len(p) == 0:
            best.append(np.zeros(len(t)))
        else:
            best.append(iou_matrix(t, p).max(axis=1))
    return np.concatenate(best) if best else np.zeros(0)


def recall(
    proposals: Mapping[str, Sequence[Proposal]],
    truths: Mapping[str, Sequence[BBox]],
    iou_threshold: float = 0.5,
    top_n: int | None = None,
) -> EvalResult:
    """Fraction of truth boxes hit by at least one of their image's top-n proposals.

    A hit needs IoU strictly greater than ``iou_threshold``. Proposals are
    ranked per image by score; ``top_n=None`` uses all of them.
    """
    best = _best_overlaps(proposals, truths, top_n)
    if len(best) == 0:
        raise ValueError("no ground-truth boxes to evaluate against")
    return EvalResult(int(np.sum(best > iou_threshold)), len(best), iou_threshold, top_n)


@dataclass(frozen=True)
class CurvePoint:
    axis: str  # "proposals" or "iou"
    value: float
    recall: float


def recall_curves(
    proposals: Mapping[str, Sequence[Proposal]],
    truths: Mapping[str, Sequence[BBox]],
    top_n_grid: Sequence[int] = DEFAULT_TOP_N_GRID,
    iou_grid: Sequence[float] = DEFAULT_IOU_GRID,
    fixed_iou: float = 0.5,
    fixed_top_n: int = 500,
) -> list[CurvePoint]:
    """Recall vs. proposal budget at ``fixed_iou`` and recall vs. IoU at ``fixed_top_n``."""
    rows = []
    for n in top_n_grid:
        rows.append(CurvePoint("proposals", n, recall(proposals, truths, fixed_iou, int(n)).recall))
    best = _best_overlaps(proposals, truths, fixed_top_n)
    if len(best) == 0:
        raise ValueError("no ground-truth boxes to evaluate against")
    for thr in iou_grid:
        rows.append(CurvePoint("iou", thr, float(np.mean(best > thr))))
    return rows


def write_curves_csv(path, rows: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("axis", "value", "recall"))
        for r in rows:
            w.writerow((r.axis, f"{r.value:g}", f"{r.recall:.6f}"))
