"""Density loss, scale-consistency loss and counting metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .density import GtPyramid

LOSS_NORMS = ("pixels", "images")


@dataclass
class LossBreakdown:
    l0: float
    l_side: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    total: float = 0.0


def _norm(pred_shape, loss_norm: str) -> float:
    if loss_norm == "pixels":
        n, _, h, w = pred_shape
        return float(n * h * w)
    if loss_norm == "images":
        return float(pred_shape[0])
    raise ValueError(f"loss_norm must be one of {LOSS_NORMS}")


def density_loss(pred: Tensor, gt, loss_norm: str = "pixels") -> Tensor:
    """Half squared Euclidean distance normalised by pixel count (or image count)."""
    target = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    return ops.half_sq_error(pred, target, _norm(pred.shape, loss_norm))


def lambda_weights(params: Mapping[str, Tensor]) -> list[Tensor]:
    return [ops.softplus(params[f"loss.lambda{i}"]) for i in range(1, 6)]


def scale_consistency_loss(out, gt: np.ndarray, pyramid, params: Mapping[str, Tensor],
                           loss_norm: str = "pixels") -> tuple[Tensor, LossBreakdown]:
    """``L0 + sum_i lambda_i * L_i`` with D_i paired to pyramid level i-1.

    ``gt`` is the (n, 1, H, W) target for D_0; ``pyramid`` is a list of five
    (n, 1, H, W) arrays (or a :class:`GtPyramid` for a single image).
    """
    if len(out.side) != 5:
        raise ValueError("scale-consistency loss needs the five side outputs")
    levels = _levels(pyramid, out.d0.shape, out.d0.dtype)
    l0 = density_loss(out.d0, gt, loss_norm)
    lams = lambda_weights(params)
    total = l0
    sides = []
    for d_i, target, lam in zip(out.side, levels, lams):
        li = density_loss(d_i, target, loss_norm)
        sides.append(li)
        total = ops.add(total, ops.broadcast_mul(li, lam))
    br = LossBreakdown(
        l0=l0.item(),
        l_side=[s.item() for s in sides],
        lambdas=[lam.item() for lam in lams],
        total=total.item(),
    )
    return total, br


def _levels(pyramid, shape, dtype) -> list[np.ndarray]:
    maps = pyramid.maps if isinstance(pyramid, GtPyramid) else list(pyramid)
    if len(maps) != 5:
        raise ValueError("pyramid must have five levels")
    return [np.asarray(m, dtype=dtype).reshape(shape) for m in maps]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mae_mse(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """MAE and root-mean-square error of (gt_count, pred_count) pairs."""
    if len(pairs) == 0:
        raise ValueError("mae_mse needs at least one pair")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    err = arr[:, 0] - arr[:, 1]
    return float(np.abs(err).mean()), float(math.sqrt((err * err).mean()))


def region_bounds(size: int, level: int) -> list[int]:
    cuts = 2 ** level
    return [size * j // cuts for j in range(cuts + 1)]


def game(pred: np.ndarray, gt: np.ndarray, level: int) -> float:
    """Sum of absolute regional count errors over a 2^L x 2^L grid."""
    if not 0 <= level <= 3:
        raise ValueError(f"GAME level must be in 0..3, got {level}")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"GAME needs equal 2-D maps, got {pred.shape} and {gt.shape}")
    rb = region_bounds(pred.shape[0], level)
    cb = region_bounds(pred.shape[1], level)
    diff = pred - gt
    total = 0.0
    for r0, r1 in zip(rb[:-1], rb[1:]):
        for c0, c1 in zip(cb[:-1], cb[1:]):
            total += abs(diff[r0:r1, c0:c1].sum())
    return total
