"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[int, int] | None  # (input index, flat index)


def _objective(out: Tensor, proj: np.ndarray) -> float:
    return float(np.sum(out.data.astype(np.float64) * proj))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
              n_coords: int = 100, step: float = 1e-3, floor: float = 1e-8,
              wrt: Sequence[int] | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``R`` is a fixed random projection.  Coordinates are sampled uniformly over
    the inputs listed in ``wrt`` (all by default); every coordinate is used when
    there are fewer than ``n_coords``.  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|)``, taken as 0 when both are below ``floor``.
    """
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    out.backward(proj.astype(out.dtype))
    analytic = {i: (inputs[i].grad if inputs[i].grad is not None else np.zeros(inputs[i].shape)) for i in wrt}

    coords = [(i, j) for i in wrt for j in range(inputs[i].data.size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst, worst_err = None, 0.0
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        plus = _objective(fn(*inputs), proj)
        flat[j] = orig - step
        minus = _objective(fn(*inputs), proj)
        flat[j] = orig
        num = (plus - minus) / (2 * step)
        ana = float(analytic[i].reshape(-1)[j])
        scale_ = max(abs(ana), abs(num))
        err = 0.0 if scale_ < floor else abs(ana - num) / scale_
        if err > worst_err:
            worst, worst_err = (i, j), err
    return GradCheckResult(worst_err, len(coords), worst)
