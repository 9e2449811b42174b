"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# sky, ground, building, vehicle, figure
PALETTE = np.array([
    [70, 130, 180],
    [128, 64, 128],
    [70, 70, 70],
    [0, 0, 142],
    [220, 20, 60],
], dtype=np.uint8)


def _write_pnm(path, magic: bytes, width: int, height: int, payload: bytes, comment: str | None = None) -> None:
    note = b"" if comment is None else b"# " + comment.encode("ascii") + b"\n"
    Path(path).write_bytes(magic + b"\n" + note + b"%d %d\n255\n" % (width, height) + payload)


def _read_pnm(path) -> tuple[bytes, int, int, bytes]:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    return magic, width, height, data[pos:]


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3, H, W), got {image.shape}")
    rgb = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    _write_pnm(path, b"P6", image.shape[2], image.shape[1], rgb.tobytes(), comment)


def write_ppm_u8(path, rgb: np.ndarray, comment: str | None = None) -> None:
    """Write an (H, W, 3) uint8 array as P6."""
    _write_pnm(path, b"P6", rgb.shape[1], rgb.shape[0], np.ascontiguousarray(rgb, dtype=np.uint8).tobytes(), comment)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into a (3, H, W) float32 image in [0, 1]."""
    magic, w, h, payload = _read_pnm(path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, got {magic!r}")
    if len(payload) < 3 * w * h:
        raise ValueError(f"{path}: payload truncated")
    rgb = np.frombuffer(payload, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3)
    return (rgb.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def write_pgm(path, labels: np.ndarray, comment: str | None = None) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("write_pgm: expected a 2-D map with values in [0, 255]")
    _write_pnm(path, b"P5", labels.shape[1], labels.shape[0], labels.astype(np.uint8).tobytes(), comment)


def read_pgm(path) -> np.ndarray:
    magic, w, h, payload = _read_pnm(path)
    if magic != b"P5":
        raise ValueError(f"{path}: expected P5, got {magic!r}")
    if len(payload) < w * h:
        raise ValueError(f"{path}: payload truncated")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).astype(np.int64)


def colorize(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """(H, W) label map -> (H, W, 3) uint8 image; classes beyond the palette wrap."""
    return palette[np.asarray(labels) % len(palette)]


def amplify(perturbation: np.ndarray, factor: float = 4.0) -> np.ndarray:
    """Perturbation scaled by ``factor`` around mid-gray, for display."""
    return np.clip(0.5 + factor * np.asarray(perturbation), 0.0, 1.0)
