"""Rasterised random shapes shared by the occlusion compositor and the
synthetic scene generator."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .rng import Rng

SHAPE_KINDS = ("ellipse", "rectangle", "polygon")


def _coords(H: int, W: int):
    yy, xx = np.mgrid[0:H, 0:W]
    return xx + 0.5, yy + 0.5


def ellipse(H, W, cx, cy, rx, ry, angle) -> np.ndarray:
    x, y = _coords(H, W)
    c, s = np.cos(angle), np.sin(angle)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def rectangle(H, W, cx, cy, rx, ry, angle) -> np.ndarray:
    x, y = _coords(H, W)
    c, s = np.cos(angle), np.sin(angle)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (np.abs(u) <= rx) & (np.abs(v) <= ry)


def polygon(H, W, vertices: np.ndarray) -> np.ndarray:
    """Fill a convex polygon given counter-clockwise ``(x, y)`` vertices."""
    x, y = _coords(H, W)
    inside = np.ones((H, W), dtype=bool)
    n = len(vertices)
    for i in range(n):
        (x0, y0), (x1, y1) = vertices[i], vertices[(i + 1) % n]
        inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
    return inside


def random_shape(H: int, W: int, rng: Rng, center=None, size_range=(6.0, 16.0), kind=None):
    """Draw one random shape; returns ``(mask, metadata)``."""
    if kind is None:
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
    lo, hi = size_range
    if center is None:
        margin = lo
        cx = margin + rng.uniform() * (W - 2 * margin)
        cy = margin + rng.uniform() * (H - 2 * margin)
    else:
        cx, cy = center
    rx = lo + rng.uniform() * (hi - lo)
    ry = lo + rng.uniform() * (hi - lo)
    angle = rng.uniform() * np.pi
    if kind == "ellipse":
        m = ellipse(H, W, cx, cy, rx, ry, angle)
    elif kind == "rectangle":
        m = rectangle(H, W, cx, cy, 0.8 * rx, 0.8 * ry, angle)
    elif kind == "polygon":
        n = 3 + rng.integers(4)
        th = np.sort(rng.uniform(n)) * 2 * np.pi
        r = 0.7 + 0.3 * rng.uniform(n)
        pts = np.stack([cx + rx * r * np.cos(th), cy + ry * r * np.sin(th)], axis=1)
        m = polygon(H, W, pts[ConvexHull(pts).vertices])
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    meta = {"kind": kind, "cx": float(cx), "cy": float(cy), "rx": float(rx),
            "ry": float(ry), "angle": float(angle)}
    return m, meta
