"""Procedural street-like scenes with pixel-exact label maps.

Classes: 0 sky, 1 ground, 2 building, 3 vehicle, 4 figure.  The figure class
is the one attacks try to hide.  Every sample is a pure function of
``(spec, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio

SKY, GROUND, BUILDING, VEHICLE, FIGURE = range(5)
CLASS_NAMES = ("sky", "ground", "building", "vehicle", "figure")

BASE_COLORS = np.array([
    [0.55, 0.72, 0.92],
    [0.42, 0.40, 0.36],
    [0.62, 0.50, 0.42],
    [0.25, 0.32, 0.62],
    [0.78, 0.30, 0.28],
], dtype=np.float32)


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    num_classes: int = 5
    buildings: tuple[int, int] = (1, 4)
    vehicles: tuple[int, int] = (0, 2)
    figures: tuple[int, int] = (1, 3)
    figure_prob: float = 0.7
    color_jitter: float = 0.08
    contrast: float = 1.0
    noise: float = 0.05
    seed: int = 0
    target_class: int = FIGURE

    def __post_init__(self):
        for name in ("size", "buildings", "vehicles", "figures"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self) -> None:
        h, w = self.size
        if h < 16 or w < 16:
            raise ValueError(f"scene size {self.size} too small (minimum 16x16)")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"scene generator renders exactly {len(CLASS_NAMES)} classes")
        for name in ("buildings", "vehicles", "figures"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid count range {name}={getattr(self, name)}")
        if not 0.0 <= self.figure_prob <= 1.0:
            raise ValueError("figure_prob must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    truth: np.ndarray  # (H, W) int64 class indices
    index: int = -1


def _paint(img, lab, mask, cls, color):
    lab[mask] = cls
    img[:, mask] = color[:, None]


def _object_color(rng, cls, spec):
    c = BASE_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    return np.clip(0.5 + spec.contrast * (c - 0.5), 0, 1).astype(np.float32)


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    spec.validate()
    h, w = spec.size
    rng = np.random.default_rng([spec.seed, index])
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((3, h, w), dtype=np.float32)
    lab = np.empty((h, w), dtype=np.int64)

    horizon = int(rng.integers(int(0.30 * h), int(0.55 * h) + 1))
    _paint(img, lab, yy < horizon, SKY, _object_color(rng, SKY, spec))
    _paint(img, lab, yy >= horizon, GROUND, _object_color(rng, GROUND, spec))

    # buildings: wall rectangle plus triangular roof, standing on the horizon
    for _ in range(rng.integers(spec.buildings[0], spec.buildings[1] + 1)):
        bw = int(rng.integers(max(4, w // 8), max(5, w // 3)))
        bh = int(rng.integers(max(3, h // 8), max(4, int(0.4 * h))))
        x0 = int(rng.integers(-bw // 3, w - 2 * bw // 3))
        base = horizon + int(rng.integers(0, max(1, h // 16)))
        top = base - bh
        roof = int(rng.integers(0, bw // 2 + 1))
        cx = x0 + (bw - 1) / 2
        wall = (xx >= x0) & (xx < x0 + bw) & (yy >= top) & (yy < base)
        tri = (yy < top) & (yy >= top - roof) & (np.abs(xx - cx) <= (yy - (top - roof)) * (bw / 2) / max(roof, 1))
        _paint(img, lab, wall | tri, BUILDING, _object_color(rng, BUILDING, spec))

    ground_rows = h - horizon
    # vehicles: rounded rectangles on the ground
    for _ in range(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1)):
        vw = int(rng.integers(max(6, w // 7), max(7, w // 4)))
        vh = int(rng.integers(max(3, h // 14), max(4, h // 8)))
        x0 = int(rng.integers(-vw // 4, w - 3 * vw // 4))
        bottom = horizon + int(rng.integers(min(vh, ground_rows - 1), ground_rows)) + 1
        y0 = bottom - vh
        r = max(1.0, min(vw, vh) / 3)
        qx = np.clip(xx, x0 + r, x0 + vw - 1 - r)
        qy = np.clip(yy, y0 + r, y0 + vh - 1 - r)
        body = (xx - qx) ** 2 + (yy - qy) ** 2 <= r * r
        body &= (xx >= x0) & (xx < x0 + vw) & (yy >= y0) & (yy < bottom)
        _paint(img, lab, body, VEHICLE, _object_color(rng, VEHICLE, spec))

    # figures: upright capsules, drawn last so they are never occluded
    if spec.figures[1] > 0 and rng.random() < spec.figure_prob:
        lo = max(1, spec.figures[0])
        for _ in range(rng.integers(lo, spec.figures[1] + 1)):
            fh = int(rng.integers(max(6, h // 7), max(7, h // 4)))
            rad = max(1.5, fh / 7)
            cx = float(rng.integers(2, w - 2))
            foot = horizon + int(rng.integers(min(fh // 2, ground_rows - 1), ground_rows))
            y_top, y_bot = foot - fh + rad, foot - rad
            qy = np.clip(yy, y_top, y_bot)
            body = (xx - cx) ** 2 + (yy - qy) ** 2 <= rad * rad
            _paint(img, lab, body, FIGURE, _object_color(rng, FIGURE, spec))

    img += rng.uniform(-spec.noise, spec.noise, img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(img, lab, index)


def generate_dataset(spec: SceneSpec, m: int, offset: int = 0) -> list[Sample]:
    """Samples at indices ``offset .. offset + m - 1``.

    Train sets use ``offset=0``; a validation split of size ``v`` uses
    ``offset=m_train`` so the two never share an index.
    """
    if m < 1:
        raise ValueError(f"dataset size must be >= 1, got {m}")
    return [generate_sample(spec, offset + k) for k in range(m)]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.truth for s in samples])


def class_histogram(samples: list[Sample], num_classes: int = 5) -> np.ndarray:
    return np.bincount(np.concatenate([s.truth.ravel() for s in samples]), minlength=num_classes)


def export_sample(sample: Sample, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    ppm, pgm = stem.with_suffix(".ppm"), stem.with_suffix(".pgm")
    imageio.write_ppm(ppm, sample.image)
    imageio.write_pgm(pgm, sample.truth)
    return ppm, pgm


def import_sample(ppm: str | Path, pgm: str | Path) -> Sample:
    image = imageio.read_ppm(ppm)
    truth = imageio.read_pgm(pgm)
    if image.shape[1:] != truth.shape:
        raise ValueError(f"{ppm} and {pgm} have different sizes: {image.shape[1:]} vs {truth.shape}")
    return Sample(image, truth)
