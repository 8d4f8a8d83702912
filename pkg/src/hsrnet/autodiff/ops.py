"""Differentiable operations over :class:`Tensor`.

Every op returns a new tensor; inputs are never mutated.  Backward closures
return one gradient per parent (``None`` where no gradient flows).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, make_result


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (raw ndarray level)
# ---------------------------------------------------------------------------

def _fit(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad or crop the bottom/right of ``x`` to spatial size ``h x w``."""
    x = x[:, :, :h, :w]
    if x.shape[2:] == (h, w):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, h - x.shape[2]), (0, w - x.shape[3])))


def _blocked_kernel(w: np.ndarray, stride: int) -> tuple[np.ndarray, int]:
    # zero-extend the kernel to a multiple of the stride
    k = w.shape[2]
    kq = -(-k // stride)
    if kq * stride != k:
        w = np.pad(w, ((0, 0), (0, 0), (0, kq * stride - k), (0, kq * stride - k)))
    return w, kq


def _im2col(xpad: np.ndarray, kq: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns ``(n, c*K*K, ho*wo)``; kernel offset a = q*stride + r."""
    n, c = xpad.shape[:2]
    s = stride
    hq, wq = ho + kq - 1, wo + kq - 1
    v = _fit(xpad, hq * s, wq * s).reshape(n, c, hq, s, wq, s)
    cols = np.empty((n, c, kq, s, kq, s, ho, wo), dtype=xpad.dtype)
    for qa in range(kq):
        for qb in range(kq):
            cols[:, :, qa, :, qb, :] = v[:, :, qa:qa + ho, :, qb:qb + wo, :].transpose(0, 1, 3, 5, 2, 4)
    return cols.reshape(n, c * (kq * s) ** 2, ho * wo)


def _col2im(cols: np.ndarray, c: int, kq: int, stride: int, ho: int, wo: int, full_hw) -> np.ndarray:
    n = cols.shape[0]
    s = stride
    hq, wq = ho + kq - 1, wo + kq - 1
    cols = cols.reshape(n, c, kq, s, kq, s, ho, wo)
    v = np.zeros((n, c, hq, s, wq, s), dtype=cols.dtype)
    for qa in range(kq):
        for qb in range(kq):
            v[:, :, qa:qa + ho, :, qb:qb + wo, :] += cols[:, :, qa, :, qb, :].transpose(0, 1, 4, 2, 5, 3)
    return _fit(v.reshape(n, c, hq * s, wq * s), *full_hw)


def _out_size(hp: int, k: int, stride: int) -> int:
    return (hp - k) // stride + 1


def _conv_raw(xpad: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, _, hp, wp = xpad.shape
    c_out, _, k, _ = w.shape
    ho, wo = _out_size(hp, k, stride), _out_size(wp, k, stride)
    wb, kq = _blocked_kernel(w, stride)
    cols = _im2col(xpad, kq, stride, ho, wo)
    out = np.matmul(wb.reshape(c_out, -1), cols)
    return out.reshape(n, c_out, ho, wo)


def _conv_raw_adjoint(g: np.ndarray, w: np.ndarray, stride: int, full_hw: tuple[int, int]) -> np.ndarray:
    """Transpose of :func:`_conv_raw` w.r.t. its padded input."""
    n, c_out, ho, wo = g.shape
    c_in = w.shape[1]
    wb, kq = _blocked_kernel(w, stride)
    cols = np.matmul(wb.reshape(c_out, -1).T, g.reshape(n, c_out, ho * wo))
    return _col2im(cols, c_in, kq, stride, ho, wo, full_hw)


def _conv_raw_wgrad(xpad: np.ndarray, g: np.ndarray, stride: int, k: int) -> np.ndarray:
    n, c_out, ho, wo = g.shape
    c_in = xpad.shape[1]
    kq = -(-k // stride)
    cols = _im2col(xpad, kq, stride, ho, wo)
    gw = np.einsum("nop,nqp->oq", g.reshape(n, c_out, ho * wo), cols)
    kk = kq * stride
    return gw.reshape(c_out, c_in, kk, kk)[:, :, :k, :k]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


# ---------------------------------------------------------------------------
# linear ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check4(x, "conv2d input")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be (c_out, c_in, k, k), got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    c_out, c_in, k, _ = kernel.shape
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < k or wp < k:
        raise ValueError("conv2d output would be empty")
    xpad = _pad(x.data, padding)
    out = _conv_raw(xpad, kernel.data, stride)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _unpad(_conv_raw_adjoint(g, kernel.data, stride, (hp, wp)), padding)
        gw = _conv_raw_wgrad(xpad, g, stride, k)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result(out, parents, backward, "conv2d")


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Learned upsampling; ``kernel`` is ``(c_in, c_out, k, k)``.

    Output side is ``stride * (h - 1) + k - 2 * padding``.  This is exactly the
    adjoint of :func:`conv2d` with the same kernel, stride and padding.
    """
    _check4(x, "transposed_conv2d input")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be square (c_in, c_out, k, k), got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.shape[1] != kernel.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[0]}")
    k = kernel.shape[2]
    n, _, h, w = x.shape
    full = (stride * (h - 1) + k, stride * (w - 1) + k)
    if full[0] - 2 * padding < 1 or full[1] - 2 * padding < 1:
        raise ValueError("transposed_conv2d output size must be positive")
    out = _unpad(_conv_raw_adjoint(x.data, kernel.data, stride, full), padding)

    def backward(g):
        gpad = _pad(g, padding)
        gx = _conv_raw(gpad, kernel.data, stride)
        gw = _conv_raw_wgrad(gpad, x.data, stride, k)
        return gx, gw

    return make_result(np.ascontiguousarray(out), (x, kernel), backward, "transposed_conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer on ``(n, c, 1, 1)`` inputs."""
    _check4(x, "linear input")
    if x.shape[2:] != (1, 1):
        raise ValueError(f"linear expects (n, c, 1, 1), got {x.shape}")
    c_out, c_in = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"dim mismatch: input has {x.shape[1]} features, weight expects {c_in}")
    flat = x.data.reshape(x.shape[0], c_in)
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[0], c_out, 1, 1)

    def backward(g):
        g2 = g.reshape(g.shape[0], c_out)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ flat
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "linear")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """``a * b`` where ``b`` matches ``a`` or is a per-channel / per-position scale."""
    _check4(a, "broadcast_mul lhs")
    _check4(b, "broadcast_mul rhs")
    n, c, h, w = a.shape
    if b.shape not in ((n, c, h, w), (n, c, 1, 1), (n, 1, h, w)):
        raise ValueError(f"cannot broadcast {b.shape} onto {a.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "broadcast_mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return make_result(x.data * x.dtype.type(factor), (x,), backward, "scale")


# ---------------------------------------------------------------------------
# pooling and reductions
# ---------------------------------------------------------------------------

def max_pool2(x: Tensor) -> Tensor:
    _check4(x, "max_pool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2")


def _window_counts(size: int, k: int) -> np.ndarray:
    starts = np.arange(0, size, k)
    return np.minimum(starts + k, size) - starts


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean; ragged edge windows average their true extent."""
    if k < 1:
        raise ValueError("avg_pool window must be >= 1")
    _check4(x, "avg_pool input")
    if k == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "avg_pool")
    n, c, h, w = x.shape
    ho, wo = -(-h // k), -(-w // k)
    padded = np.zeros((n, c, ho * k, wo * k), dtype=np.float64)
    padded[:, :, :h, :w] = x.data
    sums = padded.reshape(n, c, ho, k, wo, k).sum(axis=(3, 5))
    counts = np.outer(_window_counts(h, k), _window_counts(w, k)).astype(np.float64)
    out = (sums / counts).astype(x.dtype)

    def backward(g):
        per = g.astype(np.float64) / counts
        full = np.repeat(np.repeat(per, k, axis=2), k, axis=3)
        return (full[:, :, :h, :w].astype(g.dtype),)

    return make_result(out, (x,), backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x, "global_avg_pool input")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ValueError("global_avg_pool on empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def channel_mean(x: Tensor) -> Tensor:
    _check4(x, "channel_mean input")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).copy(),)

    return make_result(out, (x,), backward, "channel_mean")


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = (np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))).astype(x.dtype)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------------------
# channel plumbing and resampling
# ---------------------------------------------------------------------------

def channel_slice_concat(inputs: Sequence[Tensor], channel_indices: Sequence[int]) -> Tensor:
    """Stack channel ``channel_indices[k]`` of ``inputs[k]`` as output channel ``k``."""
    if len(inputs) != len(channel_indices) or not inputs:
        raise ValueError("need one channel index per input")
    n, _, h, w = inputs[0].shape
    for t, ci in zip(inputs, channel_indices):
        _check4(t, "channel_slice_concat input")
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"spatial mismatch: {t.shape} vs {(n, h, w)}")
        if not 0 <= ci < t.shape[1]:
            raise IndexError(f"channel {ci} out of range for {t.shape[1]}-channel input")
    out = np.concatenate([t.data[:, ci:ci + 1] for t, ci in zip(inputs, channel_indices)], axis=1)

    def backward(g):
        grads = []
        for k, (t, ci) in enumerate(zip(inputs, channel_indices)):
            gt = np.zeros(t.shape, dtype=g.dtype)
            gt[:, ci] = g[:, k]
            grads.append(gt)
        return tuple(grads)

    return make_result(out, tuple(inputs), backward, "channel_slice_concat")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    tensors, idx = [], []
    for t in inputs:
        for ci in range(t.shape[1]):
            tensors.append(t)
            idx.append(ci)
    return channel_slice_concat(tensors, idx)


def interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear weights, half-pixel centres, edge clamped."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale_ = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale_ - 0.5, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array (no tape)."""
    ry = interp_matrix(out_h, a.shape[-2])
    rx = interp_matrix(out_w, a.shape[-1])
    return (ry @ a.astype(np.float64) @ rx.T).astype(a.dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "bilinear_upsample input")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = x.shape[2:]
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    ry = interp_matrix(out_h, h)
    rx = interp_matrix(out_w, w)
    out = (ry @ x.data.astype(np.float64) @ rx.T).astype(x.dtype)

    def backward(g):
        return ((ry.T @ g.astype(np.float64) @ rx).astype(g.dtype),)

    return make_result(out, (x,), backward, "bilinear_upsample")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def half_sq_error(pred: Tensor, target: np.ndarray, norm: float) -> Tensor:
    """``sum((pred - target)**2) / (2 * norm)`` as a (1, 1, 1, 1) tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"dim mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.astype(np.float64)
    val = np.array((diff * diff).sum() / (2.0 * norm)).reshape(1, 1, 1, 1).astype(pred.dtype)

    def backward(g):
        return ((g.reshape(()) * diff / norm).astype(pred.dtype),)

    return make_result(val, (pred,), backward, "half_sq_error")
