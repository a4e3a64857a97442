"""Region similarity J, boundary F-measure and their mean.

Conventions: both masks empty scores 1, exactly one empty scores 0. Boundary
pixels are foreground pixels with a 4-neighbour outside the mask (outside the
image counts as background). A boundary pixel is matched when a boundary pixel
of the other mask lies within Euclidean distance ``tol``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def jaccard(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= radius * radius


def boundary_f(pred, gt, tol: int | None = None) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if tol is None:
        tol = default_tolerance(pred.shape)
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(tol)
    near_g = ndimage.binary_dilation(bg, structure=disk)
    near_p = ndimage.binary_dilation(bp, structure=disk)
    precision = (bp & near_g).sum() / n_p
    recall = (bg & near_p).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class EvalReport:
    """Per-sequence, per-object scores and their aggregates."""

    per_object: list = field(default_factory=list)  # dicts: sequence, object, J, F

    def add(self, sequence: str, obj: int, J: float, F: float) -> None:
        self.per_object.append({"sequence": sequence, "object": obj, "J": J, "F": F})

    @property
    def J_mean(self) -> float:
        return float(np.mean([r["J"] for r in self.per_object])) if self.per_object else 0.0

    @property
    def F_mean(self) -> float:
        return float(np.mean([r["F"] for r in self.per_object])) if self.per_object else 0.0

    @property
    def JF(self) -> float:
        return (self.J_mean + self.F_mean) / 2

    def summary(self) -> dict:
        return {"J_mean": self.J_mean, "F_mean": self.F_mean, "J&F": self.JF}


def score_sequence(pred_rasters, gt_rasters, num_objects: int, skip_first: bool = True, tol=None):
    """Mean J and F per object over the frames of one sequence.

    Frame 0 is the given annotation and is excluded by default.
    """
    start = 1 if skip_first and len(gt_rasters) > 1 else 0
    out = {}
    for k in range(1, num_objects + 1):
        js, fs = [], []
        for p, g in zip(pred_rasters[start:], gt_rasters[start:]):
            pk, gk = np.asarray(p) == k, np.asarray(g) == k
            js.append(jaccard(pk, gk))
            fs.append(boundary_f(pk, gk, tol))
        out[k] = (float(np.mean(js)), float(np.mean(fs)))
    return out
