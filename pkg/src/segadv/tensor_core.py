"""Dense float32 layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout.  Every forward
function is pure; the matching ``*_backward`` function takes the upstream
gradient plus the forward inputs and returns a :class:`LayerGradients`.

The functions are dtype-preserving so the finite-difference harness can
re-evaluate them in float64; production code always feeds float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents do not agree with an operation."""


@dataclass
class LayerGradients:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _conv_check(x, kernel, bias, stride, pad):
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but kernel {kernel.shape} "
            f"expects {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    oh = _conv_out_size(x.shape[2], kernel.shape[2], stride, pad)
    ow = _conv_out_size(x.shape[3], kernel.shape[3], stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape[2:]} larger than padded input {x.shape[2:]}")
    return oh, ow


def _im2col(x, kh, kw, stride, pad, oh, ow):
    # Layout (C, kh, kw, N, oh, ow) so the forward is a single matmul.
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (O, C, kh, kw), zero padded."""
    out, _ = conv2d_with_cols(x, kernel, bias, stride, pad)
    return out


def conv2d_with_cols(x, kernel, bias=None, stride=1, pad=0):
    """Forward pass that also returns the im2col buffer for reuse in backward."""
    oh, ow = _conv_check(x, kernel, bias, stride, pad)
    o, c, kh, kw = kernel.shape
    cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    out = kernel.reshape(o, -1) @ cols.reshape(c * kh * kw, -1)
    out = out.reshape(o, x.shape[0], oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def conv2d_backward(upstream: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    stride: int = 1, pad: int = 0, cols: np.ndarray | None = None) -> LayerGradients:
    oh, ow = _conv_check(x, kernel, None, stride, pad)
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if upstream.shape != (n, o, oh, ow):
        raise ShapeError(f"conv2d backward: upstream {upstream.shape} != {(n, o, oh, ow)}")
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    g = upstream.transpose(1, 0, 2, 3).reshape(o, -1)
    dkernel = (g @ cols.reshape(c * kh * kw, -1).T).reshape(kernel.shape)
    dbias = g.sum(axis=1)
    dcols = (kernel.reshape(o, -1).T @ g).reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return LayerGradients(np.ascontiguousarray(dx), {"kernel": dkernel, "bias": dbias})


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> LayerGradients:
    if upstream.shape != x.shape:
        raise ShapeError(f"relu backward: upstream {upstream.shape} != input {x.shape}")
    return LayerGradients(np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def add_backward(upstream: np.ndarray) -> tuple[LayerGradients, LayerGradients]:
    return LayerGradients(upstream), LayerGradients(upstream)


# ---------------------------------------------------------------------------
# bilinear upsampling (align_corners=False)
# ---------------------------------------------------------------------------

def interp_matrix(n_in: int, factor: int, dtype=DTYPE) -> np.ndarray:
    """(n_in*factor, n_in) matrix of 1-D linear interpolation weights.

    Output sample ``o`` reads source coordinate ``(o + 0.5) / factor - 0.5``,
    clamped to ``[0, n_in - 1]``; this is the half-pixel (align-corners-false)
    convention.
    """
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def _check_factor(factor: int) -> None:
    if int(factor) != factor or factor < 2:
        raise ValueError(f"bilinear_upsample: factor must be an integer >= 2, got {factor}")


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    _check_factor(factor)
    _check_rank(x, 4, "bilinear_upsample input")
    uh = interp_matrix(x.shape[2], factor, x.dtype)
    uw = interp_matrix(x.shape[3], factor, x.dtype)
    return np.ascontiguousarray(uh @ x @ uw.T)


def bilinear_upsample_backward(upstream: np.ndarray, factor: int) -> LayerGradients:
    _check_factor(factor)
    _check_rank(upstream, 4, "bilinear_upsample upstream")
    h, w = upstream.shape[2] // factor, upstream.shape[3] // factor
    if (h * factor, w * factor) != upstream.shape[2:]:
        raise ShapeError(f"bilinear_upsample backward: {upstream.shape} not divisible by {factor}")
    uh = interp_matrix(h, factor, upstream.dtype)
    uw = interp_matrix(w, factor, upstream.dtype)
    return LayerGradients(np.ascontiguousarray(uh.T @ upstream @ uw))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent_map(logits: np.ndarray, target: np.ndarray,
                     pixel_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Spatially averaged, per-pixel weighted cross-entropy and its logit gradient.

    ``logits`` is (N, C, H, W); ``target`` and ``pixel_weights`` are (H, W) or
    (N, H, W).  Each image contributes ``sum_ij w_ij * CE_ij / (H*W)`` and the
    returned loss is the sum over the batch, so the gradient slice of image
    ``k`` is exactly the gradient of that image's own loss.
    """
    _check_rank(logits, 4, "softmax_xent_map logits")
    n, c, h, w = logits.shape
    target = np.broadcast_to(np.asarray(target), (n, h, w)) if np.ndim(target) == 2 else np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"softmax_xent_map: target {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"softmax_xent_map: class index outside [0, {c - 1}]")
    if pixel_weights is None:
        weights = np.ones((n, h, w), dtype=logits.dtype)
    else:
        weights = np.broadcast_to(np.asarray(pixel_weights, dtype=logits.dtype), (n, h, w))
        if np.any(weights < 0):
            raise ValueError("softmax_xent_map: pixel weights must be non-negative")
    logp = log_softmax(logits)
    tgt = target[:, None].astype(np.intp)
    nll = -np.take_along_axis(logp, tgt, axis=1)[:, 0]
    scale = logits.dtype.type(1.0 / (h * w))
    loss = float((weights * nll).sum(dtype=np.float64) * (1.0 / (h * w)))
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt, np.take_along_axis(grad, tgt, axis=1) - 1, axis=1)
    grad *= (weights * scale)[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def grad_check(func: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
               step: float = 1e-3, indices=None) -> float:
    """Max over coordinates of ``|analytic - central_diff| / max(1, |analytic|)``.

    ``func`` maps a tensor to a scalar and is evaluated in float64.  When
    ``indices`` (an iterable of flat indices) is given only those coordinates
    are probed.
    """
    x64 = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x64.shape:
        raise ShapeError(f"grad_check: analytic gradient {analytic.shape} vs input {x64.shape}")
    if not (np.all(np.isfinite(x64)) and np.all(np.isfinite(analytic))):
        raise FloatingPointError("grad_check: non-finite input or analytic gradient")
    flat = x64.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for k in idx:
        orig = flat[k]
        flat[k] = orig + step
        fp = float(func(x64))
        flat[k] = orig - step
        fm = float(func(x64))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite function value at coordinate {k}")
        numeric = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# TNSR binary format
# ---------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"


def tnsr_bytes(x: np.ndarray) -> bytes:
    """Serialize: magic, u8 rank, rank x u32 LE extents, LE float32 payload."""
    x = np.asarray(x)
    if x.ndim > 4:
        raise ShapeError(f"TNSR supports rank <= 4, got {x.ndim}")
    head = TNSR_MAGIC + struct.pack("<B", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tnsr_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR blob starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != TNSR_MAGIC:
        raise ValueError(f"TNSR: bad magic at byte {offset}")
    if len(buf) < offset + 5:
        raise ValueError("TNSR: truncated before rank")
    rank = buf[offset + 4]
    if rank > 4:
        raise ValueError(f"TNSR: rank {rank} exceeds 4")
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise ValueError("TNSR: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise ValueError(f"TNSR: payload truncated (need {nbytes} bytes, have {len(buf) - pos})")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(DTYPE).reshape(shape)
    return arr, pos + nbytes


def save_tnsr(path: str | Path | BinaryIO, x: np.ndarray) -> None:
    data = tnsr_bytes(x)
    if hasattr(path, "write"):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def load_tnsr(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tnsr_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"TNSR: {len(buf) - end} trailing bytes in {path}")
    return arr
