"""Adversarial target segmentations: static (fixed scene) and dynamic (hide one class)."""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

import numpy as np
from scipy import ndimage


class EmptyBackgroundError(ValueError):
    pass


@dataclass(frozen=True)
class PixelPartition:
    """Pixels predicted as the hidden class ``source`` (``fg``) versus the rest."""

    fg: np.ndarray  # bool (H, W): I_o
    source: int

    @property
    def bg(self) -> np.ndarray:
        return ~self.fg

    @classmethod
    def from_prediction(cls, pred: np.ndarray, o: int) -> "PixelPartition":
        return cls(np.asarray(pred) == o, int(o))


@dataclass(frozen=True)
class TargetSpec:
    y_target: np.ndarray
    partition: PixelPartition | None = None
    mode: str = "static"


def static_target(pred_t0: np.ndarray) -> TargetSpec:
    return TargetSpec(np.array(pred_t0, dtype=np.int64, copy=True), None, "static")


def _nearest_bg_squared(bg: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from each pixel to the nearest background pixel."""
    dist = ndimage.distance_transform_edt(~bg)
    return np.rint(dist * dist).astype(np.int64)


def _first_bg_at(bg: np.ndarray, i: int, j: int, d2: int) -> tuple[int, int]:
    # offsets with di^2 + dj^2 == d2, visited in row-major order of (i+di, j+dj)
    h, w = bg.shape
    r = isqrt(d2)
    for di in range(-r, r + 1):
        rem = d2 - di * di
        dj = isqrt(rem)
        if dj * dj != rem:
            continue
        ii = i + di
        if not 0 <= ii < h:
            continue
        for jj in ((j - dj, j + dj) if dj else (j,)):
            if 0 <= jj < w and bg[ii, jj]:
                return ii, jj
    raise AssertionError(f"no background pixel at squared distance {d2} from {(i, j)}")


def nearest_background_index(partition: PixelPartition, i: int, j: int) -> tuple[int, int]:
    """Background pixel closest to (i, j); ties go to the smallest row, then column."""
    bg = partition.bg
    if not bg.any():
        raise EmptyBackgroundError("no background to fill from")
    if bg[i, j]:
        return i, j
    d2 = _nearest_bg_squared(bg)[i, j]
    return _first_bg_at(bg, i, j, int(d2))


def nearest_fill_indices(bg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index maps of the nearest background pixel for every pixel."""
    if not bg.any():
        raise EmptyBackgroundError("no background to fill from")
    ii, jj = np.indices(bg.shape)
    d2 = _nearest_bg_squared(bg)
    for i, j in zip(*np.nonzero(~bg)):
        ii[i, j], jj[i, j] = _first_bg_at(bg, int(i), int(j), int(d2[i, j]))
    return ii, jj


def dynamic_target(pred: np.ndarray, o: int) -> TargetSpec:
    """Prediction with class ``o`` removed and its pixels filled from the nearest background."""
    pred = np.asarray(pred, dtype=np.int64)
    part = PixelPartition.from_prediction(pred, o)
    if not part.fg.any():
        return TargetSpec(pred.copy(), part, "dynamic")
    ii, jj = nearest_fill_indices(part.bg)
    return TargetSpec(pred[ii, jj], part, "dynamic")


def least_likely_target(probs: np.ndarray) -> TargetSpec:
    """Per-pixel least likely class (lowest index on ties), used as a static target."""
    return static_target(np.argmin(probs, axis=-3))


def least_overlap(candidates: list[np.ndarray], preds: np.ndarray) -> tuple[int, list[float]]:
    """Index of the candidate label map agreeing least with a stack of predictions.

    Ties go to the lowest index.  Also returns every candidate's agreement.
    """
    preds = np.asarray(preds)
    agreement = [float(np.mean(preds == c)) for c in candidates]
    return int(np.argmin(agreement)), agreement
