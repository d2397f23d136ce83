"""The fixed differentiable operation set.

Broadcasting is deliberately limited to exact shape match or a
single-element operand; anything else raises DimensionError. All ops
run in the dtype of their inputs (mixing float32 and float64 is a
contract error) and validate finiteness when checked mode is on.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..exceptions import ContractError, DegenerateGateError, DimensionError
from .tensor import Tensor, record


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in op: {sorted(d.name for d in dtypes)}")


def _result(kind: str, inputs, data: np.ndarray, backward_fn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        record(kind, inputs, out, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a gradient onto a scalar-shaped operand."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) * np.ones(shape, dtype=g.dtype)


def _binary_shapes(a: Tensor, b: Tensor, kind: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", (a, b), ad @ bd, bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError("transpose2d expects a 2-D tensor")

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _result("transpose2d", (a,), np.ascontiguousarray(a.data.T), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused x @ w + b with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    _check_same_dtype(*([x, w] if b is None else [x, w, b]))
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    if b is None:
        def bwd(g):
            return g @ wd.T, xd.T @ g
        return _result("linear", (x, w), out, bwd)

    def bwd_b(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result("linear", (x, w, b), out, bwd_b)


# ---------------------------------------------------------------------------
# 3-D convolution (3x3x3 kernels, zero padding 1)

def _stride_triple(stride) -> tuple[int, int, int]:
    s = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    if len(s) != 3 or any(v not in (1, 2) for v in s):
        raise DimensionError(f"conv3d stride components must be 1 or 2, got {stride}")
    return s


def _im2col(xp: np.ndarray, stride: tuple[int, int, int]):
    c = xp.shape[0]
    ho = (xp.shape[1] - 2 + stride[0] - 1) // stride[0]
    wo = (xp.shape[2] - 2 + stride[1] - 1) // stride[1]
    so = (xp.shape[3] - 2 + stride[2] - 1) // stride[2]
    n = ho * wo * so
    cols = np.empty((c, 27, n), dtype=xp.dtype)
    off = 0
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                block = xp[:,
                           di:di + stride[0] * ho:stride[0],
                           dj:dj + stride[1] * wo:stride[1],
                           dk:dk + stride[2] * so:stride[2]]
                cols[:, off, :] = block.reshape(c, n)
                off += 1
    return cols.reshape(c * 27, n), (ho, wo, so)


def conv3d(x: Tensor, kernels: Tensor, stride=1) -> Tensor:
    """3-D convolution with fixed 3x3x3 kernels and zero padding of 1.

    ``stride`` is a single factor or one per spatial axis, each 1 or 2;
    output dims are ceil(dim / stride) per axis.
    """
    st = _stride_triple(stride)
    if x.ndim != 4:
        raise DimensionError(f"conv3d input must be [C,H,W,S], got {x.shape}")
    if kernels.ndim != 5 or kernels.shape[2:] != (3, 3, 3) or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3d kernels must be [Cout,{x.shape[0]},3,3,3], got {kernels.shape}")
    if min(x.shape[1:]) < 1:
        raise DimensionError(f"conv3d: non-positive spatial dims {x.shape[1:]}")
    _check_same_dtype(x, kernels)

    cin, h, w, s = x.shape
    cout = kernels.shape[0]
    xp = np.zeros((cin, h + 2, w + 2, s + 2), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1, 1:s + 1] = x.data
    cols, (ho, wo, so) = _im2col(xp, st)
    kmat = kernels.data.reshape(cout, cin * 27)
    out = (kmat @ cols).reshape(cout, ho, wo, so)

    def bwd(g):
        gmat = g.reshape(cout, -1)
        gk = (gmat @ cols.T).reshape(kernels.shape)
        gcols = (kmat.T @ gmat).reshape(cin, 3, 3, 3, ho, wo, so)
        buf = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                for dk in range(3):
                    buf[:,
                        di:di + st[0] * ho:st[0],
                        dj:dj + st[1] * wo:st[1],
                        dk:dk + st[2] * so:st[2]] += gcols[:, di, dj, dk]
        gx = buf[:, 1:h + 1, 1:w + 1, 1:s + 1]
        return np.ascontiguousarray(gx), gk

    return _result("conv3d", (x, kernels), out, bwd)


def upsample_nearest(x: Tensor, factors=(2, 2, 2)) -> Tensor:
    """Nearest-neighbour upsampling; per-axis factor 1 or 2."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest input must be [C,H,W,S], got {x.shape}")
    f = tuple(factors)
    if len(f) != 3 or any(v not in (1, 2) for v in f):
        raise DimensionError(f"upsample factors must be 1 or 2, got {factors}")
    c, h, w, s = x.shape
    out = x.data
    for axis, factor in enumerate(f, start=1):
        if factor == 2:
            out = np.repeat(out, 2, axis=axis)

    def bwd(g):
        view = g.reshape(c, h, f[0], w, f[1], s, f[2])
        return (view.sum(axis=(2, 4, 6)),)

    return _result("upsample_nearest", (x,), out, bwd)


# ---------------------------------------------------------------------------
# softmax family

def softmax(t: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction.

    Entries equal to -inf map to exactly 0. A row whose entries are all
    -inf raises DegenerateGateError.
    """
    x = t.data
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateGateError("softmax: a row has no finite entry")
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    y = e / z

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result("softmax", (t,), y, bwd)


def masked_softmax(t: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to mask==True entries.

    Masked-out entries are exactly 0 in the output and receive zero
    gradient. A row with no selected entry raises DegenerateGateError.
    """
    if mask.shape != t.shape:
        raise DimensionError(f"mask shape {mask.shape} != tensor shape {t.shape}")
    if not np.all(mask.any(axis=-1)):
        raise DegenerateGateError("masked_softmax: a row selects no entries")
    x = np.where(mask, t.data, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    y = e / z

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(mask, y * (g - dot), 0.0),)

    return _result("masked_softmax", (t,), y, bwd)


# ---------------------------------------------------------------------------
# elementwise

def relu(t: Tensor) -> Tensor:
    pos = t.data > 0

    def bwd(g):
        return (g * pos,)

    return _result("relu", (t,), np.where(pos, t.data, 0.0), bwd)


def softplus(t: Tensor) -> Tensor:
    """ln(1 + e^x) with an overflow guard: x > 30 returns x."""
    x = t.data
    safe = np.minimum(x, 30.0)
    out = np.where(x > 30.0, x, np.log1p(np.exp(safe)))
    sig = _sigmoid_stable(x)

    def bwd(g):
        return (g * sig,)

    return _result("softplus", (t,), out.astype(x.dtype), bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    y = _sigmoid_stable(t.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _result("sigmoid", (t,), y, bwd)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    _check_same_dtype(a, b)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    _check_same_dtype(a, b)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _result("mul", (a, b), ad * bd, bwd)


def scale(t: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _result("scale", (t,), t.data * np.asarray(s, dtype=t.dtype), bwd)


# ---------------------------------------------------------------------------
# reductions

def _check_axis(t: Tensor, axis) -> None:
    if axis is not None and not (-t.ndim <= axis < t.ndim):
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")


def reduce_sum(t: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(t, axis)
    out = t.data.sum(axis=axis)
    shape = t.shape

    def bwd(g):
        if axis is None:
            return (np.full(shape, g, dtype=t.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(t.dtype, copy=True),)

    return _result("sum", (t,), out, bwd)


def reduce_mean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(t, axis)
    out = t.data.mean(axis=axis)
    shape = t.shape
    n = t.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shape, g / n, dtype=t.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).astype(t.dtype, copy=True),)

    return _result("mean", (t,), out, bwd)


# ---------------------------------------------------------------------------
# normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta are per-feature."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("layer_norm: gamma/beta must match the last axis")
    _check_same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        axes = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result("layer_norm", (x, gamma, beta), out, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over its spatial extent; x is [C, ...]."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("instance_norm: gamma/beta must match the channel axis")
    _check_same_dtype(x, gamma, beta)
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gshape = (c,) + (1,) * (x.ndim - 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def bwd(g):
        gg = g * gamma.data.reshape(gshape)
        m1 = gg.mean(axis=axes, keepdims=True)
        m2 = (gg * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result("instance_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# structural ops

def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: incompatible shapes {a.shape}, {b.shape}")
    _check_same_dtype(a, b)
    na = a.shape[0]

    def bwd(g):
        return g[:na], g[na:]

    return _result("concat_rows", (a, b), np.concatenate([a.data, b.data], axis=0), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat_channels: incompatible shapes {a.shape}, {b.shape}")
    _check_same_dtype(a, b)
    ca = a.shape[0]

    def bwd(g):
        return np.ascontiguousarray(g[:ca]), np.ascontiguousarray(g[ca:])

    return _result("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=0), bwd)


def _strictly_increasing(idx: np.ndarray) -> bool:
    return idx.size < 2 or bool(np.all(idx[1:] > idx[:-1]))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape
    unique = _strictly_increasing(idx)

    def bwd(g):
        buf = np.zeros(shape, dtype=g.dtype)
        if unique:
            buf[idx] = g
        else:
            np.add.at(buf, idx, g)
        return (buf,)

    return _result("gather_rows", (x,), x.data[idx], bwd)


def scatter_rows(y: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of y at idx within an n_rows output; duplicates add."""
    if y.ndim != 2:
        raise DimensionError("scatter_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows, y.shape[1]), dtype=y.dtype)
    if _strictly_increasing(idx):
        out[idx] = y.data
    else:
        np.add.at(out, idx, y.data)

    def bwd(g):
        return (g[idx],)

    return _result("scatter_rows", (y,), out, bwd)


def rowwise_mul(y: Tensor, w: Tensor) -> Tensor:
    """Multiply each row of y [n, c] by the matching entry of w [n] or [n, 1]."""
    if y.ndim != 2:
        raise DimensionError("rowwise_mul expects a 2-D left operand")
    if w.shape not in ((y.shape[0],), (y.shape[0], 1)):
        raise DimensionError(f"rowwise_mul: weight shape {w.shape} does not match {y.shape[0]} rows")
    _check_same_dtype(y, w)
    wcol = w.data.reshape(-1, 1)
    yd = y.data

    def bwd(g):
        gy = g * wcol
        gw = (g * yd).sum(axis=1).reshape(w.shape)
        return gy, gw

    return _result("rowwise_mul", (y, w), yd * wcol, bwd)


def slice_cols(t: Tensor, j0: int, j1: int) -> Tensor:
    if t.ndim != 2 or not (0 <= j0 < j1 <= t.shape[1]):
        raise DimensionError(f"slice_cols: bad range [{j0},{j1}) for shape {t.shape}")
    shape = t.shape

    def bwd(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[:, j0:j1] = g
        return (buf,)

    return _result("slice_cols", (t,), np.ascontiguousarray(t.data[:, j0:j1]), bwd)


def squeeze_channel(t: Tensor) -> Tensor:
    """Drop a leading channel axis of size 1."""
    if t.ndim < 2 or t.shape[0] != 1:
        raise DimensionError(f"squeeze_channel expects a leading axis of 1, got {t.shape}")
    shape = t.shape

    def bwd(g):
        return (g.reshape(shape),)

    return _result("squeeze_channel", (t,), t.data.reshape(shape[1:]), bwd)


def flatten_tokens(x: Tensor) -> Tensor:
    """[C,H,W,S] -> [(H*W*S), C] row-major over the spatial grid."""
    if x.ndim != 4:
        raise DimensionError("flatten_tokens expects [C,H,W,S]")
    c = x.shape[0]
    dims = x.shape[1:]

    def bwd(g):
        return (np.ascontiguousarray(g.T).reshape(c, *dims),)

    return _result("flatten_tokens", (x,), np.ascontiguousarray(x.data.reshape(c, -1).T), bwd)


def tokens_to_volume(t: Tensor, dims) -> Tensor:
    """[(H*W*S), C] -> [C,H,W,S]; inverse of flatten_tokens."""
    h, w, s = dims
    if t.ndim != 2 or t.shape[0] != h * w * s:
        raise DimensionError(f"tokens_to_volume: {t.shape} does not match dims {dims}")
    c = t.shape[1]

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(c, -1).T),)

    return _result("tokens_to_volume", (t,), np.ascontiguousarray(t.data.T).reshape(c, h, w, s), bwd)


# ---------------------------------------------------------------------------
# losses

def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy against {0,1} targets, computed stably."""
    if logits.shape != target.shape:
        raise DimensionError(f"bce_with_logits: {logits.shape} vs target {target.shape}")
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = per.mean()
    n = z.size

    def bwd(g):
        return (g * (_sigmoid_stable(z) - y) / n,)

    return _result("bce_with_logits", (logits,), np.asarray(out, dtype=z.dtype), bwd)


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - softDice(sigmoid(logits), target) with eps smoothing."""
    if logits.shape != target.shape:
        raise DimensionError(f"soft_dice_loss: {logits.shape} vs target {target.shape}")
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    p = _sigmoid_stable(z)
    num = 2.0 * np.sum(p * y) + eps
    den = np.sum(p) + np.sum(y) + eps
    out = 1.0 - num / den

    def bwd(g):
        ddice_dp = (2.0 * y * den - num) / (den * den)
        return (g * (-ddice_dp) * p * (1.0 - p),)

    return _result("soft_dice_loss", (logits,), np.asarray(out, dtype=z.dtype), bwd)
