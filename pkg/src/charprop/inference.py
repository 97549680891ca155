"""Multi-scale dense inference and proposal post-processing."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from charprop.boxes import BBox, decode_regression_array, iou_matrix
from charprop.data import resize_image
from charprop.network import HeadOutput, Model, forward_full
from charprop.templates import TemplateSet

logger = logging.getLogger(__name__)

CSV_HEADER = ("image_id", "x", "y", "w", "h", "score", "template", "scale")


@dataclass(frozen=True)
class Proposal:
    box: BBox
    score: float
    template: int
    scale: float = 1.0


@dataclass
class PyramidConfig:
    ratio: float = 2 ** -0.25
    max_scale: float = 1.0
    min_scale: float = 0.0
    num_scales: int | None = None
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    max_proposals: int = 1000

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("pyramid ratio must lie in (0, 1)")
        for name in ("score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_scale <= 0:
            raise ValueError("max_scale must be positive")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CHARPROP_THREADS", "1")))
    except ValueError:
        return 1


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def pyramid_scales(height: int, width: int, config: PyramidConfig, receptive_field: tuple[int, int]) -> list[float]:
    rw, rh = receptive_field
    scales = []
    s = config.max_scale
    while s >= config.min_scale and _round(height * s) >= rh and _round(width * s) >= rw:
        scales.append(s)
        if config.num_scales is not None and len(scales) >= config.num_scales:
            break
        s *= config.ratio
    return scales


def build_pyramid(
    image: np.ndarray, config: PyramidConfig, receptive_field: tuple[int, int] = (29, 29)
) -> list[tuple[np.ndarray, float]]:
    """Geometric sequence of bilinear rescalings, largest first.

    Levels whose image would be smaller than the receptive field are dropped.
    """
    h, w = image.shape[:2]
    scales = pyramid_scales(h, w, config, receptive_field)
    if not scales:
        raise ValueError(f"image {w}x{h} is smaller than the receptive field at every scale")
    levels = []
    for s in scales:
        size = (_round(w * s), _round(h * s))
        levels.append((image if size == (w, h) else resize_image(image, size), s))
    return levels


def _decode_arrays(head: HeadOutput, stride: int, templates: TemplateSet, threshold: float):
    """Coarse boxes, scores, 1-based classes and regression values above threshold."""
    rw, rh = templates.receptive_field
    k = head.num_classes
    probs = head.probabilities()[0]  # (K, H', W')
    fg = probs[: k - 1]
    cls, rows, cols = np.nonzero(fg > threshold)
    scores = fg[cls, rows, cols]
    sizes = np.asarray(templates.sizes, dtype=np.float64)[cls]
    cx = stride * cols + (rw - 1) / 2
    cy = stride * rows + (rh - 1) / 2
    boxes = np.stack([cx - (sizes[:, 0] - 1) / 2, cy - (sizes[:, 1] - 1) / 2, sizes[:, 0], sizes[:, 1]], axis=1)
    reg = head.regress[0].reshape(k, 4, *probs.shape[1:])
    t = reg[cls, :, rows, cols].astype(np.float64)
    return boxes.reshape(-1, 4), scores, cls + 1, t.reshape(-1, 4)


def decode_responses(
    head: HeadOutput, stride: int, receptive_field: tuple[int, int], templates: TemplateSet, threshold: float
) -> list[Proposal]:
    """Coarse proposals in the coordinates of the image fed to the network.

    Unit ``(row, col)`` maps to the centre ``stride * (col, row) + (R - 1) / 2``
    and carries the size of its template.
    """
    if tuple(receptive_field) != tuple(templates.receptive_field):
        templates = TemplateSet(templates.aspect_ratios, tuple(receptive_field), templates.mode)
    boxes, scores, cls, _ = _decode_arrays(head, stride, templates, threshold)
    return [Proposal(BBox(*map(float, b)), float(s), int(c)) for b, s, c in zip(boxes, scores, cls)]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices by descending score.

    Equal scores keep input order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlap = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlap <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


def nms(proposals: Sequence[Proposal], iou_threshold: float) -> list[Proposal]:
    if not proposals:
        return []
    boxes = np.array([tuple(p.box) for p in proposals])
    scores = np.array([p.score for p in proposals])
    return [proposals[i] for i in nms_indices(boxes, scores, iou_threshold)]


def _level_proposals(model: Model, level: np.ndarray, scale_xy: tuple[float, float], threshold: float):
    head = forward_full(model, level)
    boxes, scores, cls, t = _decode_arrays(head, model.stride, model.templates, threshold)
    refined = decode_regression_array(t, boxes)
    ok = np.all(np.isfinite(refined), axis=1) & (refined[:, 2] > 0) & (refined[:, 3] > 0)
    if not ok.all():
        logger.warning("dropped %d proposals with non-finite regression", int((~ok).sum()))
    refined = refined[ok]
    sx, sy = scale_xy
    refined = refined / np.array([sx, sy, sx, sy])
    return refined, scores[ok], cls[ok]


def generate_proposals(model: Model, image: np.ndarray, config: PyramidConfig | None = None) -> list[Proposal]:
    """Ranked proposals in original-image pixels.

    Every pyramid level is scored densely, decoded, refined by regression
    and mapped back to the original image; one class-agnostic NMS over the
    pooled set follows, then truncation to ``max_proposals``.
    """
    config = config or PyramidConfig()
    if model.templates is None:
        raise ValueError("model has no template set")
    h, w = image.shape[:2]
    levels = build_pyramid(image, config, model.receptive_field)

    def run(level):
        pixels, s = level
        scale_xy = (pixels.shape[1] / w, pixels.shape[0] / h)
        return _level_proposals(model, pixels, scale_xy, config.score_threshold)

    workers = worker_count()
    if workers > 1 and len(levels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, levels))
    else:
        results = [run(lv) for lv in levels]

    boxes = np.concatenate([r[0] for r in results]).reshape(-1, 4)
    scores = np.concatenate([r[1] for r in results])
    cls = np.concatenate([r[2] for r in results])
    scale = np.concatenate([np.full(len(r[1]), s) for r, (_, s) in zip(results, levels)])
    keep = nms_indices(boxes, scores, config.nms_iou)[: config.max_proposals]
    return [
        Proposal(BBox(*map(float, boxes[i])), float(scores[i]), int(cls[i]), float(scale[i])) for i in keep
    ]


def write_proposals_csv(path, proposals: Mapping[str, Iterable[Proposal]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for image_id, props in proposals.items():
            for p in props:
                w.writerow(
                    [image_id, f"{p.box.x:.3f}", f"{p.box.y:.3f}", f"{p.box.w:.3f}", f"{p.box.h:.3f}",
                     f"{p.score:.6f}", p.template, f"{p.scale:.6g}"]
                )


def read_proposals_csv(path) -> dict[str, list[Proposal]]:
    """Read proposal rows; ``template`` and ``scale`` columns are optional.

    Rows keep file order within each image.
    """
    out: dict[str, list[Proposal]] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#") or (lineno == 1 and row[0] == "image_id"):
                continue
            if len(row) < 6:
                raise ValueError(f"{path}:{lineno}: expected at least 6 columns, got {len(row)}")
            x, y, w, h, score = (float(v) for v in row[1:6])
            template = int(row[6]) if len(row) > 6 and row[6] else 0
            scale = float(row[7]) if len(row) > 7 and row[7] else 1.0
            out.setdefault(row[0], []).append(Proposal(BBox(x, y, w, h), score, template, scale))
    return out
