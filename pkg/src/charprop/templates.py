"""Aspect-ratio templates.

Classes are 1-based: templates are classes ``1..K-1`` in ascending aspect
order and class ``K`` is background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from charprop.boxes import BBox

DEFAULT_MODE = "aspect"
LITERAL_MODE = "literal"


def template_size(aspect: float, receptive_field: tuple[int, int], mode: str = DEFAULT_MODE) -> tuple[float, float]:
    """Patch size ``(w, h)`` of a template inside the receptive field.

    The default mode fits a box of the given width/height ratio into the
    receptive field touching its longer side. ``literal`` uses
    ``(Rw(1-a)/2, Rh)`` for ``a < 1`` and ``(Rw, Rh(1-1/a)/2)`` otherwise,
    which shrinks near-square templates towards zero size.
    """
    if not aspect > 0:
        raise ValueError(f"aspect ratio must be positive, got {aspect}")
    rw, rh = receptive_field
    if mode == DEFAULT_MODE:
        return (rw * aspect, float(rh)) if aspect < 1 else (float(rw), rh / aspect)
    if mode == LITERAL_MODE:
        return (rw * (1 - aspect) / 2, float(rh)) if aspect < 1 else (float(rw), rh * (1 - 1 / aspect) / 2)
    raise ValueError(f"unknown template mode {mode!r}")


@dataclass(frozen=True)
class TemplateSet:
    aspect_ratios: tuple[float, ...]
    receptive_field: tuple[int, int]
    mode: str = DEFAULT_MODE

    def __post_init__(self):
        a = np.asarray(self.aspect_ratios, dtype=float)
        if len(a) == 0 or np.any(a <= 0):
            raise ValueError("aspect ratios must be positive and non-empty")
        if np.any(np.diff(a) < 0):
            raise ValueError("aspect ratios must be sorted ascending")

    @property
    def num_classes(self) -> int:
        """K, templates plus background."""
        return len(self.aspect_ratios) + 1

    @property
    def background(self) -> int:
        return self.num_classes

    @property
    def sizes(self) -> list[tuple[float, float]]:
        return [template_size(a, self.receptive_field, self.mode) for a in self.aspect_ratios]

    def assign(self, box: BBox) -> int:
        """1-based template whose aspect is nearest in log space."""
        d = np.abs(np.log(np.asarray(self.aspect_ratios)) - np.log(box.w / box.h))
        return int(np.argmin(d)) + 1


def cluster_templates(
    boxes: list[BBox],
    num_classes: int,
    receptive_field: tuple[int, int] = (29, 29),
    mode: str = DEFAULT_MODE,
    max_iter: int = 100,
) -> TemplateSet:
    """One-dimensional k-means on log aspect ratio, ``num_classes - 1`` centers.

    Centers start at evenly spaced quantiles, so the result depends only on
    the input boxes.
    """
    k = num_classes - 1
    if k < 1:
        raise ValueError("num_classes must be at least 2")
    logs = np.sort(np.log([b.w / b.h for b in boxes if b.w > 0 and b.h > 0]))
    if len(logs) < k:
        raise ValueError(f"need at least {k} boxes to fit {k} templates, got {len(logs)}")
    centers = np.quantile(logs, (np.arange(k) + 0.5) / k)
    for _ in range(max_iter):
        assign = np.abs(logs[:, None] - centers[None, :]).argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            members = logs[assign == j]
            if len(members):
                new[j] = members.mean()
            else:
                # re-seed an empty cluster at the worst-fit point
                err = np.abs(logs - centers[assign])
                new[j] = logs[int(err.argmax())]
        if np.allclose(new, centers, rtol=0, atol=1e-12):
            break
        centers = new
    return TemplateSet(tuple(float(a) for a in np.sort(np.exp(centers))), tuple(receptive_field), mode)
