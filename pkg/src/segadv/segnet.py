"""Miniature fully-convolutional encoder/decoder segmentation network.

Encoder: ``len(widths)`` stages, each a stride-2 3x3 conv followed by a
stride-1 3x3 conv (ReLU after both), so stage ``s`` (1-based) runs at
resolution ``H / 2**s``.  Decoder: a 1x1 scoring conv on the deepest stage,
then bilinear upsampling back towards full resolution, adding 1x1-conv score
maps from the configured skip stages on the way (FCN-style fusion).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SEGNET-CKPT 1\n"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file could not be parsed; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"checkpoint field '{field}': {message}")
        self.field = field


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    widths: tuple[int, ...] = (8, 16, 32)
    skips: tuple[int, ...] = (2,)
    in_channels: int = 3
    image_size: tuple[int, int] = (64, 64)
    input_range: tuple[float, float] = (0.0, 1.0)
    input_scale: float = 1.0

    def __post_init__(self):
        # normalise lists from JSON/INI into tuples so equality is structural
        for name in ("widths", "skips", "image_size", "input_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def stages(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stages < 1 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if len(set(self.skips)) != len(self.skips) or any(not 1 <= s < self.stages for s in self.skips):
            raise ConfigError(f"skips must be distinct stage indices in [1, {self.stages - 1}], got {self.skips}")
        h, w = self.image_size
        div = 2 ** self.stages
        if h % div or w % div or h < div or w < div:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 2**stages = {div}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.params.values():
            p.flags.writeable = False

    def digest(self) -> str:
        """SHA-256 of the serialized checkpoint; identifies the model in artifacts."""
        return hashlib.sha256(to_bytes(self)).hexdigest()


@dataclass
class Prediction:
    probs: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = config.in_channels
    for s, width in enumerate(config.widths, start=1):
        shapes[f"enc{s}_down.kernel"] = (width, c_in, 3, 3)
        shapes[f"enc{s}_down.bias"] = (width,)
        shapes[f"enc{s}_conv.kernel"] = (width, width, 3, 3)
        shapes[f"enc{s}_conv.bias"] = (width,)
        c_in = width
    shapes["score.kernel"] = (config.num_classes, c_in, 1, 1)
    shapes["score.bias"] = (config.num_classes,)
    for s in config.skips:
        shapes[f"skip{s}.kernel"] = (config.num_classes, config.widths[s - 1], 1, 1)
        shapes[f"skip{s}.bias"] = (config.num_classes,)
    return shapes


def build_model(config: ModelConfig, seed: int) -> Checkpoint:
    """Kernels ~ U(-b, b) with ``b = sqrt(6 / fan_in)``; biases zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".kernel"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(tc.DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=tc.DTYPE)
    return Checkpoint(config, params, {"init_seed": seed, "epochs": 0})


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _as_batch(image: np.ndarray) -> tuple[np.ndarray, bool]:
    image = np.asarray(image)
    if image.ndim == 3:
        return image[None], True
    return image, False


def _check_input(config: ModelConfig, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != config.in_channels or tuple(x.shape[2:]) != config.image_size:
        raise tc.ShapeError(
            f"input shape {x.shape} does not match (N, {config.in_channels}, {config.image_size[0]}, "
            f"{config.image_size[1]})"
        )


def forward(params: dict, config: ModelConfig, x: np.ndarray, keep: bool = False):
    """Logits for a batch ``x`` (N, C_in, H, W).  With ``keep`` also returns the tape."""
    tape = []
    # fixed preprocessing: centre on the middle of the input range, then scale
    lo, hi = config.input_range
    h = (x - x.dtype.type((lo + hi) / 2)) * x.dtype.type(config.input_scale)
    feats = {}
    for s in range(1, config.stages + 1):
        for part, stride in (("down", 2), ("conv", 1)):
            k, b = params[f"enc{s}_{part}.kernel"], params[f"enc{s}_{part}.bias"]
            z, cols = tc.conv2d_with_cols(h, k, b, stride, 1)
            if keep:
                tape.append((f"enc{s}_{part}", h, cols, stride, 1, z))
            h = tc.relu(z)
        feats[s] = h
    out, cols = tc.conv2d_with_cols(h, params["score.kernel"], params["score.bias"])
    if keep:
        tape.append(("score", h, cols, 1, 0, None))
    level = config.stages
    for s in sorted(config.skips, reverse=True):
        factor = 2 ** (level - s)
        out = tc.bilinear_upsample(out, factor)
        if keep:
            tape.append(("up", factor))
        skip, cols = tc.conv2d_with_cols(feats[s], params[f"skip{s}.kernel"], params[f"skip{s}.bias"])
        if keep:
            tape.append((f"skip{s}", feats[s], cols, 1, 0, None))
        out = tc.add(out, skip)
        level = s
    if level > 0:
        out = tc.bilinear_upsample(out, 2 ** level)
        if keep:
            tape.append(("up", 2 ** level))
    return (out, tape) if keep else out


def backward(params: dict, config: ModelConfig, tape: list, dlogits: np.ndarray,
             need_params: bool = True) -> tc.LayerGradients:
    """Back-propagate ``dlogits`` through a forward tape."""
    grads: dict[str, np.ndarray] = {}
    g = dlogits
    skip_grads: dict[int, np.ndarray] = {}
    enc_entries = []
    # decoder, in reverse
    for entry in reversed(tape):
        name = entry[0]
        if name == "up":
            g = tc.bilinear_upsample_backward(g, entry[1]).input_grad
        elif name.startswith("skip"):
            _, inp, cols, stride, pad, _ = entry
            lg = tc.conv2d_backward(g, inp, params[f"{name}.kernel"], stride, pad, cols)
            skip_grads[int(name[4:])] = lg.input_grad
            if need_params:
                grads[f"{name}.kernel"], grads[f"{name}.bias"] = lg.param_grads["kernel"], lg.param_grads["bias"]
            # add node passes g through unchanged to the upsampled branch
        elif name == "score":
            _, inp, cols, stride, pad, _ = entry
            lg = tc.conv2d_backward(g, inp, params["score.kernel"], stride, pad, cols)
            if need_params:
                grads["score.kernel"], grads["score.bias"] = lg.param_grads["kernel"], lg.param_grads["bias"]
            g = lg.input_grad
        else:
            enc_entries.append(entry)
    # encoder entries were collected deepest-first
    for entry in enc_entries:
        name, inp, cols, stride, pad, z = entry
        s = int(name[3:name.index("_")])
        if name.endswith("_conv") and s in skip_grads:
            g = g + skip_grads[s]
        g = tc.relu_backward(g, z).input_grad
        lg = tc.conv2d_backward(g, inp, params[f"{name}.kernel"], stride, pad, cols)
        if need_params:
            grads[f"{name}.kernel"], grads[f"{name}.bias"] = lg.param_grads["kernel"], lg.param_grads["bias"]
        g = lg.input_grad
    if config.input_scale != 1.0:
        g = g * g.dtype.type(config.input_scale)
    return tc.LayerGradients(g, grads)


def logits(model: Checkpoint, image: np.ndarray) -> np.ndarray:
    x, single = _as_batch(image)
    _check_input(model.config, x)
    out = forward(model.params, model.config, x.astype(tc.DTYPE, copy=False))
    return out[0] if single else out


def labels_from_probs(probs: np.ndarray, axis: int = -3) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(probs, axis=axis).astype(np.int64)


def predict(model: Checkpoint, image: np.ndarray) -> Prediction:
    """Softmax probabilities and labels for one image (3, H, W) or a batch."""
    z = logits(model, image)
    probs = tc.softmax(z, axis=-3)
    return Prediction(probs, labels_from_probs(probs))


def predict_labels(model: Checkpoint, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = [predict(model, images[i:i + batch_size]).labels for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def tau_mask(probs: np.ndarray, target: np.ndarray, tau: float) -> np.ndarray:
    """True where a pixel is predicted as its target class with probability > tau."""
    p_t = np.take_along_axis(probs, target[:, None].astype(np.intp), axis=1)[:, 0]
    return (np.argmax(probs, axis=1) == target) & (p_t > tau)


def loss_and_input_gradient(model: Checkpoint, image: np.ndarray, target: np.ndarray,
                            pixel_weights: np.ndarray | None = None, tau: float = 1.0):
    """Masked weighted loss and its input gradient for a batch (N, 3, H, W).

    Pixels already predicted as their target with probability above ``tau`` get
    weight zero; the mask comes from this forward pass.  The loss is summed
    over the batch, so each image's gradient slice is its own gradient.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    x, single = _as_batch(image)
    _check_input(model.config, x)
    target = np.asarray(target)
    if single:
        target = target[None]
        if pixel_weights is not None and np.ndim(pixel_weights) == 2:
            pixel_weights = np.asarray(pixel_weights)[None]
    if target.shape != (x.shape[0],) + x.shape[2:]:
        raise tc.ShapeError(f"target shape {target.shape} does not match image {x.shape}")
    out, tape = forward(model.params, model.config, x.astype(tc.DTYPE, copy=False), keep=True)
    probs = tc.softmax(out)
    weights = np.ones(target.shape, dtype=tc.DTYPE) if pixel_weights is None else \
        np.array(np.broadcast_to(pixel_weights, target.shape), dtype=tc.DTYPE)
    weights[tau_mask(probs, target, tau)] = 0
    loss, dlogits = tc.softmax_xent_map(out, target, weights)
    grad = backward(model.params, model.config, tape, dlogits, need_params=False).input_grad
    return loss, (grad[0] if single else grad)


def input_gradient(model: Checkpoint, image: np.ndarray, target: np.ndarray,
                   pixel_weights: np.ndarray | None = None, tau: float = 1.0) -> np.ndarray:
    return loss_and_input_gradient(model, image, target, pixel_weights, tau)[1]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2:
        images, labels = dataset
    else:
        dataset = list(dataset)
        if not dataset:
            raise ValueError("train: dataset is empty")
        images = np.stack([s.image for s in dataset])
        labels = np.stack([s.truth for s in dataset])
    images = np.asarray(images, dtype=tc.DTYPE)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("train: dataset is empty")
    return images, labels


def dataset_loss(model: Checkpoint, dataset, batch_size: int = 64) -> float:
    """Mean unweighted spatially-averaged cross-entropy over a dataset."""
    images, labels = _stack_dataset(dataset)
    total = 0.0
    for i in range(0, len(images), batch_size):
        z = forward(model.params, model.config, images[i:i + batch_size])
        total += tc.softmax_xent_map(z, labels[i:i + batch_size])[0]
    return total / len(images)


def train(model: Checkpoint, dataset, epochs: int, lr: float, seed: int,
          batch_size: int = 8, lr_decay: float = 1.0) -> Checkpoint:
    """Plain mini-batch SGD on the unweighted per-pixel cross-entropy.

    Batch order is drawn from ``seed``; ``lr`` is multiplied by ``lr_decay``
    after each epoch.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    images, labels = _stack_dataset(dataset)
    _check_input(model.config, images)
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    n = len(images)
    lr0 = lr
    last = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, tape = forward(params, model.config, images[idx], keep=True)
            loss, dlogits = tc.softmax_xent_map(out, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            scale = tc.DTYPE(1.0 / len(idx))
            grads = backward(params, model.config, tape, dlogits * scale).param_grads
            step = tc.DTYPE(lr)
            for name, g in grads.items():
                params[name] -= step * g
            running += loss
        last = running / n
        lr *= lr_decay
        log.info("epoch %d loss %.4f", epoch, last)
    meta = dict(model.meta)
    meta.update(epochs=int(meta.get("epochs", 0)) + epochs, train_seed=seed, lr=float(lr0),
                final_loss=float(last) if epochs else meta.get("final_loss"))
    if epochs == 0:
        params = dict(model.params)
    return Checkpoint(model.config, params, meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def to_bytes(model: Checkpoint) -> bytes:
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "meta": model.meta,
        "tensors": names,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(f"{len(head)}\n".encode())
    buf.write(head)
    for name in names:
        buf.write(tc.tnsr_bytes(model.params[name]))
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError("magic", "not a segnet checkpoint")
    pos = len(CKPT_MAGIC)
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise CheckpointError("header_length", "missing")
    try:
        hlen = int(data[pos:nl])
    except ValueError:
        raise CheckpointError("header_length", "not an integer") from None
    pos = nl + 1
    if len(data) < pos + hlen:
        raise CheckpointError("header", "truncated")
    try:
        header = json.loads(data[pos:pos + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError("header", str(exc)) from None
    pos += hlen
    for key in ("config", "meta", "tensors"):
        if key not in header:
            raise CheckpointError(key, "missing from header")
    try:
        config = ModelConfig.from_dict(header["config"])
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise CheckpointError("config", str(exc)) from None
    expected = param_shapes(config)
    params = {}
    for name in header["tensors"]:
        try:
            arr, pos = tc.tnsr_from_bytes(data, pos)
        except ValueError as exc:
            raise CheckpointError(name, str(exc)) from None
        if name not in expected or arr.shape != expected[name]:
            raise CheckpointError(name, f"unexpected tensor or shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(name, "non-finite values")
        params[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(sorted(missing)[0], "missing tensor")
    if pos != len(data):
        raise CheckpointError("tensors", f"{len(data) - pos} trailing bytes")
    return Checkpoint(config, params, header["meta"])


def save(model: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
