"""Dot annotations to density maps, the ground-truth pyramid and ROI masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .autodiff.ops import avg_pool, bilinear_upsample
from .autodiff.tensor import Tensor

PYRAMID_SCALES = (1, 2, 4, 8, 16)
FALLBACK_SIGMA = 4.0


@dataclass
class PointAnnotations:
    points: np.ndarray  # (n, 2) as (x, y) pixel coordinates
    image_w: int
    image_h: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.image_w < 1 or self.image_h < 1:
            raise ValueError("image dims must be positive")
        if len(pts) and not (
            (pts[:, 0] >= 0).all() and (pts[:, 0] < self.image_w).all()
            and (pts[:, 1] >= 0).all() and (pts[:, 1] < self.image_h).all()
        ):
            raise ValueError("annotation outside image bounds")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Adaptive:
    k: int = 3
    beta: float = 0.3


@dataclass(frozen=True)
class Fixed:
    sigma: float


@dataclass
class GtPyramid:
    maps: list[np.ndarray] = field(default_factory=list)


def knn_mean_distance(points, k: int) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points.

    Entries are NaN where fewer than ``k`` other points exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n <= k:
        return np.full(n, np.nan)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    # column 0 is the point itself (distance 0)
    return dist[:, 1:].mean(axis=1)


def kernel_sigmas(ann: PointAnnotations, mode: Adaptive | Fixed) -> np.ndarray:
    if isinstance(mode, Fixed):
        if not mode.sigma > 0:
            raise ValueError(f"sigma must be positive, got {mode.sigma}")
        return np.full(len(ann), float(mode.sigma))
    if mode.beta <= 0:
        raise ValueError(f"beta must be positive, got {mode.beta}")
    d = knn_mean_distance(ann.points, mode.k)
    sig = mode.beta * d
    # undefined neighbourhoods and coincident points both get the fixed fallback
    return np.where(np.isfinite(sig) & (sig > 0), sig, FALLBACK_SIGMA)


def _stamp(grid: np.ndarray, x: float, y: float, sigma: float) -> None:
    h, w = grid.shape
    r = math.ceil(3 * sigma)
    cx, cy = int(math.floor(x)), int(math.floor(y))
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    gx = np.exp(-((np.arange(x0, x1) + 0.5 - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(y0, y1) + 0.5 - y) ** 2) / (2 * sigma * sigma))
    patch = np.outer(gy, gx)
    grid[y0:y1, x0:x1] += patch / patch.sum()


def make_density(ann: PointAnnotations, mode: Adaptive | Fixed = Adaptive()) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians, one per annotation (float32 H x W)."""
    sigmas = kernel_sigmas(ann, mode)
    grid = np.zeros((ann.image_h, ann.image_w), dtype=np.float64)
    for (x, y), s in zip(ann.points, sigmas):
        _stamp(grid, x, y, s)
    return grid.astype(np.float32)


def _pool_upsample(d: np.ndarray, k: int) -> np.ndarray:
    h, w = d.shape
    pooled = avg_pool(Tensor(d[None, None]), k)
    return bilinear_upsample(pooled, h, w).data[0, 0]


def make_pyramid(d: np.ndarray) -> GtPyramid:
    """Average-pool at 1, 2, 4, 8, 16 and resize each level back to H x W."""
    d = np.asarray(d, dtype=np.float32)
    if d.ndim != 2 or min(d.shape) < 16:
        raise ValueError(f"pyramid needs a 2-D map at least 16x16, got {d.shape}")
    return GtPyramid([d.copy()] + [_pool_upsample(d, k) for k in PYRAMID_SCALES[1:]])


def apply_roi(d: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if d.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"shape mismatch: map {d.shape} vs mask {mask.shape}")
    return (d * mask).astype(d.dtype)
