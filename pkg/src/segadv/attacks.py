"""Sign-gradient perturbation generators.

All perturbations live in input units (images in [0, 1]).  The network is
always evaluated on ``clip(x + perturbation, 0, 1)`` and gradients are taken
with respect to that network input; the stored perturbation itself is only
clipped to the epsilon box.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import segnet
from . import tensor_core as tc
from .targets import TargetSpec

log = logging.getLogger(__name__)


class AttackConfigError(ValueError):
    pass


class AttackDiverged(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite gradient at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 10 / 255
    alpha: float = 1 / 255
    n: int = 60
    tau: float = 0.75
    omega: float | None = 0.9999

    def validate(self) -> None:
        if not self.eps > 0:
            raise AttackConfigError(f"eps must be > 0, got {self.eps}")
        if not self.alpha > 0:
            raise AttackConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.n < 1:
            raise AttackConfigError(f"n must be >= 1, got {self.n}")
        if not 0 < self.tau <= 1:
            raise AttackConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.omega is not None and not 0 <= self.omega <= 1:
            raise AttackConfigError(f"omega must lie in [0, 1], got {self.omega}")


@dataclass
class Perturbation:
    """Proto-perturbation of shape (C, h, w) tiled periodically over (H, W)."""

    proto: np.ndarray
    image_size: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        check_tiling(self.image_size, self.proto.shape[1:])

    @property
    def tile(self) -> tuple[int, int]:
        return tuple(self.proto.shape[1:])

    @property
    def reps(self) -> tuple[int, int]:
        return self.image_size[0] // self.tile[0], self.image_size[1] // self.tile[1]

    def full(self) -> np.ndarray:
        return np.tile(self.proto, (1,) + self.reps)


def check_tiling(image_size, tile) -> None:
    (hh, ww), (h, w) = image_size, tile
    if h < 1 or w < 1 or hh % h or ww % w:
        raise AttackConfigError(f"tile {tuple(tile)} does not divide image size {tuple(image_size)}")


def clip_eps(t: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(t, -eps, eps).astype(np.asarray(t).dtype, copy=False)


def apply(pert: Perturbation | np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adversarial example ``clip(x + tiled perturbation, 0, 1)``.

    A plain array may also be a per-image stack with the same shape as ``x``.
    """
    full = pert.full() if isinstance(pert, Perturbation) else np.asarray(pert)
    x = np.asarray(x)
    if full.shape != x.shape[-3:] and full.shape != x.shape:
        raise tc.ShapeError(f"perturbation {full.shape} does not match image {x.shape}")
    return np.clip(x + full, 0.0, 1.0).astype(tc.DTYPE, copy=False)


# ---------------------------------------------------------------------------
# loss weights and gradients
# ---------------------------------------------------------------------------

def pixel_weights(target: TargetSpec, omega: float | None) -> np.ndarray | None:
    """omega on hidden-class pixels, 1 - omega elsewhere; None means uniform."""
    if omega is None or target.mode == "static":
        return None
    if target.partition is None:
        raise AttackConfigError("omega weighting needs a dynamic target with a pixel partition")
    fg = target.partition.fg
    return np.where(fg, np.float32(omega), np.float32(1.0 - omega)).astype(tc.DTYPE)


def _stack_targets(targets: Sequence[TargetSpec], omega):
    y = np.stack([t.y_target for t in targets])
    ws = [pixel_weights(t, omega) for t in targets]
    if all(w is None for w in ws):
        return y, None
    shape = y.shape[1:]
    return y, np.stack([np.ones(shape, tc.DTYPE) if w is None else w for w in ws])


def weighted_loss_grad(model: segnet.Checkpoint, x: np.ndarray, target: TargetSpec,
                       omega: float | None, tau: float) -> np.ndarray:
    """Input gradient of the tau-masked, omega-weighted segmentation loss at ``x``."""
    return segnet.input_gradient(model, x, target.y_target, pixel_weights(target, omega), tau)


# ---------------------------------------------------------------------------
# image-dependent attacks
# ---------------------------------------------------------------------------

def fgsm(model: segnet.Checkpoint, x: np.ndarray, y_true: np.ndarray, eps: float) -> np.ndarray:
    """Single untargeted step ``eps * sign(grad J(f(x), y_true))``."""
    g = segnet.input_gradient(model, x, y_true, None, tau=1.0)
    return (np.float32(eps) * np.sign(g)).astype(tc.DTYPE)


def iterative_targeted(model: segnet.Checkpoint, x: np.ndarray, target: TargetSpec | Sequence[TargetSpec],
                       cfg: AttackConfig, trace: list | None = None,
                       on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Clipped sign-gradient descent on the target loss, starting from zero.

    ``x`` is one image (3, H, W) with one target, or a batch (N, 3, H, W) with
    a target per image; each image gets its own perturbation.  ``trace``
    collects the loss evaluated before every update.
    """
    cfg.validate()
    batched = np.ndim(x) == 4
    targets = list(target) if batched else [target]
    xb = np.asarray(x, dtype=tc.DTYPE)
    xb = xb if batched else xb[None]
    if len(targets) != len(xb):
        raise tc.ShapeError(f"{len(xb)} images but {len(targets)} targets")
    y, w = _stack_targets(targets, cfg.omega)
    xi = np.zeros_like(xb)
    eps, alpha = tc.DTYPE(cfg.eps), tc.DTYPE(cfg.alpha)
    for it in range(cfg.n):
        x_adv = np.clip(xb + xi, 0.0, 1.0)
        loss, g = segnet.loss_and_input_gradient(model, x_adv, y, w, cfg.tau)
        if not np.all(np.isfinite(g)):
            raise AttackDiverged(it)
        if trace is not None:
            trace.append(loss)
        xi = clip_eps(xi - alpha * np.sign(g), eps)
        if on_step is not None:
            on_step(it, xi)
    return xi if batched else xi[0]


def least_likely(model: segnet.Checkpoint, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Iterative least-likely-class attack: the targeted attack aimed at per-pixel argmin labels."""
    from .targets import least_likely_target
    probs = segnet.predict(model, x).probs
    if np.ndim(x) == 4:
        return iterative_targeted(model, x, [least_likely_target(p) for p in probs], cfg)
    return iterative_targeted(model, x, least_likely_target(probs), cfg)


# ---------------------------------------------------------------------------
# universal perturbation
# ---------------------------------------------------------------------------

def fold_tiles(grad: np.ndarray, tile: tuple[int, int]) -> np.ndarray:
    """Sum of the (C, h, w) blocks of a (C, H, W) gradient over all tiles."""
    c, hh, ww = grad.shape
    h, w = tile
    return grad.reshape(c, hh // h, h, ww // w, w).sum(axis=(1, 3))


def universal_perturbation(model: segnet.Checkpoint, images: np.ndarray, targets: Sequence[TargetSpec],
                           cfg: AttackConfig, tile: tuple[int, int] | None = None, batch_size: int = 50,
                           trace: list | None = None,
                           on_step: Callable[[int, np.ndarray], None] | None = None) -> Perturbation:
    """Optimise a periodic perturbation shared by every training image.

    Each iteration averages the input gradient over all ``m`` images (in fixed
    batch order) and over all tiles, then takes one clipped sign step on the
    proto-perturbation.
    """
    cfg.validate()
    images = np.asarray(images, dtype=tc.DTYPE)
    if images.ndim != 4 or len(images) == 0:
        raise tc.ShapeError(f"expected a non-empty batch (m, C, H, W), got {images.shape}")
    if len(targets) != len(images):
        raise tc.ShapeError(f"{len(images)} images but {len(targets)} targets")
    m, c, hh, ww = images.shape
    tile = (hh, ww) if tile is None else tuple(tile)
    check_tiling((hh, ww), tile)
    reps = (hh // tile[0], ww // tile[1])
    batches = []
    for start in range(0, m, batch_size):
        y, w = _stack_targets(targets[start:start + batch_size], cfg.omega)
        batches.append((slice(start, start + batch_size), y, w))
    proto = np.zeros((c,) + tile, dtype=tc.DTYPE)
    eps, alpha = tc.DTYPE(cfg.eps), tc.DTYPE(cfg.alpha)
    denom = tc.DTYPE(m * reps[0] * reps[1])
    for it in range(cfg.n):
        full = np.tile(proto, (1,) + reps)
        total = np.zeros((c, hh, ww), dtype=tc.DTYPE)
        loss_sum = 0.0
        for sl, y, w in batches:
            x_adv = np.clip(images[sl] + full, 0.0, 1.0)
            loss, g = segnet.loss_and_input_gradient(model, x_adv, y, w, cfg.tau)
            if not np.all(np.isfinite(g)):
                raise AttackDiverged(it)
            total += g.sum(axis=0)
            loss_sum += loss
        if trace is not None:
            trace.append(loss_sum / m)
        mean_grad = fold_tiles(total, tile) / denom
        proto = clip_eps(proto - alpha * np.sign(mean_grad), eps)
        if on_step is not None:
            on_step(it, proto)
    meta = {"eps": cfg.eps, "alpha": cfg.alpha, "n": cfg.n, "tau": cfg.tau, "omega": cfg.omega,
            "m": m, "tile": list(tile)}
    return Perturbation(proto, (hh, ww), meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_perturbation(pert: Perturbation, path: str | Path, **extra) -> Path:
    """Write ``<path>`` (TNSR proto) and ``<path>.json`` (sidecar metadata)."""
    path = Path(path)
    tc.save_tnsr(path, pert.proto)
    side = {"image_size": list(pert.image_size), "tile": list(pert.tile), **pert.meta, **extra}
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")
    return sidecar


def load_perturbation(path: str | Path) -> Perturbation:
    path = Path(path)
    proto = tc.load_tnsr(path)
    sidecar = path.with_name(path.name + ".json")
    try:
        side = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing perturbation sidecar {sidecar}") from None
    if "image_size" not in side:
        raise ValueError(f"{sidecar}: field 'image_size' missing")
    if proto.ndim != 3 or list(proto.shape[1:]) != side.get("tile", list(proto.shape[1:])):
        raise ValueError(f"{sidecar}: field 'tile' disagrees with tensor shape {proto.shape}")
    meta = {k: v for k, v in side.items() if k not in ("image_size", "tile")}
    return Perturbation(proto, tuple(side["image_size"]), meta)


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
