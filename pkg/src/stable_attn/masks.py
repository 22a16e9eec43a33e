"""Binary masks (``H x W`` bool arrays) and 8-bit PGM I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .errors import ShapeError


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ShapeError(f"a mask must be a non-empty 2-D raster, got shape {m.shape}")
    return m.astype(bool)


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def _square(r: int) -> np.ndarray:
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def inner_band(m: np.ndarray, d: int) -> np.ndarray:
    """Foreground pixels within Chebyshev distance ``d`` of the contour; the
    outside of the image counts as background."""
    if not m.any():
        return np.zeros_like(m)
    return m & ~binary_erosion(m, structure=_square(d), border_value=0)


def boundary_band(m: np.ndarray, r: int) -> np.ndarray:
    """Pixels on either side of the contour within Chebyshev distance ``r``.
    The image frame is not treated as a contour."""
    grown = binary_dilation(m, structure=_square(r))
    shrunk = binary_erosion(m, structure=_square(r), border_value=1)
    return grown & ~shrunk


def bbox(m: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box ``(x0, y0, x1, y1)`` in pixel-edge coordinates."""
    ys, xs = np.nonzero(m)
    if len(xs) == 0:
        raise ValueError("empty mask has no bounding box")
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def downsample_mean(a: np.ndarray, k: int) -> np.ndarray:
    H, W = a.shape
    if H % k or W % k:
        raise ShapeError(f"cannot pool {a.shape} by {k}")
    return a.reshape(H // k, k, W // k, k).mean(axis=(1, 3))


# PGM -------------------------------------------------------------------------

def write_pgm(path: str | Path, raster: np.ndarray, comment: str | None = None) -> None:
    """Write an 8-bit binary PGM. Bool rasters map to 0/255, floats in [0, 1]
    are scaled by 255 and rounded. ``comment`` goes into a header comment line."""
    a = np.asarray(raster)
    if a.dtype == bool:
        px = a.astype(np.uint8) * 255
    elif np.issubdtype(a.dtype, np.floating):
        px = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    else:
        px = np.clip(a, 0, 255).astype(np.uint8)
    H, W = px.shape
    note = "" if comment is None else "# " + comment.replace("\n", " ") + "\n"
    Path(path).write_bytes(f"P5\n{note}{W} {H}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a uint8 ``H x W`` array."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    W, H, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=W * H, offset=pos)
    return data.reshape(H, W).copy()


def read_mask_pgm(path: str | Path) -> np.ndarray:
    return read_pgm(path) >= 128
