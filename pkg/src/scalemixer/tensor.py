"""Dense f64 tensors with a small reverse-mode autodiff engine.

Every operation returns a new immutable :class:`Tensor`.  When any input
requires a gradient the result carries a :class:`Node` recording the op tag,
its parents and a closure mapping the output gradient to parent gradients.
Node ids come from a monotonically increasing counter, so sorting reachable
nodes by id yields a valid topological order for :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "ContractError",
    "DimensionError",
    "GeometryError",
    "Gradients",
    "Node",
    "Tensor",
    "abs_",
    "add",
    "allow_nonfinite",
    "backward",
    "bilinear_sample",
    "concat",
    "conv2d_patchify",
    "cos",
    "deconv2d_unpatchify",
    "depthwise_conv3x3",
    "finite_diff_grad",
    "gelu",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "scatter_rows",
    "silu",
    "sin",
    "slice_last",
    "softmax_last_axis",
    "sub",
    "sum_",
    "take_rows",
    "tensor",
    "transpose",
]

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Grid or patch geometry is inconsistent."""


class ContractError(ValueError):
    """A documented precondition does not hold."""


_state = threading.local()
_ids = itertools.count()


def _nonfinite_allowed() -> bool:
    return getattr(_state, "allow_nonfinite", False)


@contextlib.contextmanager
def allow_nonfinite():
    """Debug escape hatch: skip the NaN/Inf check inside the block."""
    prev = _nonfinite_allowed()
    _state.allow_nonfinite = True
    try:
        yield
    finally:
        _state.allow_nonfinite = prev


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple["Tensor", ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    """Immutable row-major f64 array, optionally tracked by autodiff."""

    __slots__ = ("data", "node")

    def __init__(self, data, requires_grad: bool = False, *, _node: Node | None = None,
                 _raw: bool = False):
        arr = data if _raw else np.array(data, dtype=np.float64, copy=True)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"empty extent in shape {arr.shape}")
        if not _nonfinite_allowed() and not np.isfinite(arr).all():
            raise FloatingPointError("non-finite value in tensor")
        arr.flags.writeable = False
        self.data = arr
        if _node is None and requires_grad:
            _node = Node(next(_ids), "leaf", (), None)
        self.node = _node

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def id(self) -> int | None:
        return None if self.node is None else self.node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def T(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Iterable[Tensor], grad_fn) -> Tensor:
    parents = tuple(parents)
    data = np.asarray(data, dtype=np.float64)
    node = None
    if any(p.node is not None for p in parents):
        node = Node(next(_ids), op, parents, grad_fn)
    return Tensor(data, _node=node, _raw=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def sin(x: Tensor) -> Tensor:
    return _make(np.sin(x.data), "sin", (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), "cos", (x,), lambda g: (-g * np.sin(x.data),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))

    def grad_fn(g):
        return (g * (cdf + v * np.exp(-0.5 * v * v) * _INV_SQRT2PI),)

    return _make(v * cdf, "gelu", (x,), grad_fn)


def silu(x: Tensor) -> Tensor:
    v = x.data
    sig = expit(v)
    return _make(v * sig, "silu", (x,), lambda g: (g * sig * (1.0 + v * (1.0 - sig)),))


# ------------------------------------------------------------------ reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


# ------------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", xs, grad_fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice {start}:{stop} outside last axis of {x.shape}")

    def grad_fn(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], "slice_last", (x,), grad_fn)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along axis 0; repeated indices accumulate in the gradient."""
    index = np.asarray(index, dtype=np.intp)

    def grad_fn(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], "take_rows", (x,), grad_fn)


def scatter_rows(x: Tensor, index, rows: Tensor) -> Tensor:
    """Copy of ``x`` with ``x[index] = rows``; indices must be distinct."""
    index = np.asarray(index, dtype=np.intp)
    if len(np.unique(index)) != len(index):
        raise ContractError("scatter_rows needs distinct indices")
    if rows.shape != (len(index),) + x.shape[1:]:
        raise DimensionError(f"rows {rows.shape} do not fit index of length {len(index)}")
    out = x.data.copy()
    out[index] = rows.data

    def grad_fn(g):
        gx = g.copy()
        gx[index] = 0.0
        return gx, g[index]

    return _make(out, "scatter_rows", (x, rows), grad_fn)


# ---------------------------------------------------------------------- linalg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), grad_fn)


def softmax_last_axis(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, "layer_norm", (x, gamma, beta), grad_fn)


# -------------------------------------------------------------- grid operators


def conv2d_patchify(field: Tensor, kernel: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Non-overlapping PxP patches of an HxWxC field -> (H/P * W/P) x d tokens.

    Token order is row-major over the patch grid.  ``kernel`` has shape
    (P, P, C, d) and acts on each patch flattened in (row, col, channel) order.
    """
    if field.ndim != 3:
        raise DimensionError(f"field must be HxWxC, got {field.shape}")
    H, W, C = field.shape
    P = patch
    if P < 1 or H % P or W % P:
        raise GeometryError(f"patch {P} does not divide grid {H}x{W}")
    if kernel.shape[:3] != (P, P, C):
        raise DimensionError(f"kernel {kernel.shape} does not match patch {P} and {C} channels")
    d = kernel.shape[3]
    hp, wp = H // P, W // P
    patches = transpose(reshape(field, (hp, P, wp, P, C)), (0, 2, 1, 3, 4))
    flat = reshape(patches, (hp * wp, P * P * C))
    return matmul(flat, reshape(kernel, (P * P * C, d))) + bias


def deconv2d_unpatchify(tokens: Tensor, kernel: Tensor, patch: int, out_channels: int,
                        grid: tuple[int, int], bias: Tensor | None = None) -> Tensor:
    """Inverse geometry of :func:`conv2d_patchify`.

    Each token is mapped by ``kernel`` (d, P, P, C) to its own PxP patch of the
    output, so the result is (grid_rows*P) x (grid_cols*P) x C.
    """
    hp, wp = grid
    P, C = patch, out_channels
    if tokens.ndim != 2 or tokens.shape[0] != hp * wp:
        raise GeometryError(f"{tokens.shape[0]} tokens do not fill a {hp}x{wp} grid")
    d = tokens.shape[1]
    if kernel.shape != (d, P, P, C):
        raise DimensionError(f"kernel {kernel.shape} != {(d, P, P, C)}")
    flat = matmul(tokens, reshape(kernel, (d, P * P * C)))
    out = reshape(transpose(reshape(flat, (hp, wp, P, P, C)), (0, 2, 1, 3, 4)),
                  (hp * P, wp * P, C))
    return out if bias is None else out + bias


def depthwise_conv3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 convolution over an h x w x c grid with edge padding.

    Edge (replicate) padding keeps a spatially constant input constant.
    """
    if x.ndim != 3:
        raise DimensionError(f"x must be h x w x c, got {x.shape}")
    h, w, c = x.shape
    if kernel.shape != (3, 3, c) or bias.shape != (c,):
        raise DimensionError(f"kernel {kernel.shape} / bias {bias.shape} mismatch {c} channels")
    rows = np.clip(np.arange(-1, h + 1), 0, h - 1)
    cols = np.clip(np.arange(-1, w + 1), 0, w - 1)
    padded = x.data[rows][:, cols]
    out = np.zeros((h, w, c))
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + h, dj:dj + w] * kernel.data[di, dj]
    out += bias.data

    def grad_fn(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros((3, 3, c))
        for di in range(3):
            for dj in range(3):
                gpad[di:di + h, dj:dj + w] += g * kernel.data[di, dj]
                gk[di, dj] = (g * padded[di:di + h, dj:dj + w]).sum(axis=(0, 1))
        tmp = np.zeros((h, w + 2, c))
        np.add.at(tmp, rows, gpad)
        gx = np.zeros((h, w, c))
        np.add.at(gx, (slice(None), cols), tmp)
        return gx, gk, g.sum(axis=(0, 1))

    return _make(out, "dwconv3x3", (x, kernel, bias), grad_fn)


def bilinear_sample(field: Tensor, coords: Tensor) -> Tensor:
    """Sample an h x w x d field at m continuous (row, col) grid coordinates.

    Coordinates are clamped to [0, h-1] x [0, w-1].  The result is
    differentiable in both the field and the (unclamped interior) coords.
    """
    if field.ndim != 3:
        raise DimensionError(f"field must be h x w x d, got {field.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be m x 2, got {coords.shape}")
    h, w, _ = field.shape
    r_raw, c_raw = coords.data[:, 0], coords.data[:, 1]
    r = np.clip(r_raw, 0.0, h - 1)
    c = np.clip(c_raw, 0.0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.intp), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[:, None]
    f = field.data
    f00, f01, f10, f11 = f[r0, c0], f[r0, c1], f[r1, c0], f[r1, c1]
    out = (1 - fr) * (1 - fc) * f00 + (1 - fr) * fc * f01 + fr * (1 - fc) * f10 + fr * fc * f11
    inside_r = ((r_raw > 0) & (r_raw < h - 1))[:, None] if h > 1 else np.zeros((len(r), 1), bool)
    inside_c = ((c_raw > 0) & (c_raw < w - 1))[:, None] if w > 1 else np.zeros((len(c), 1), bool)

    def grad_fn(g):
        gf = np.zeros_like(f)
        np.add.at(gf, (r0, c0), (1 - fr) * (1 - fc) * g)
        np.add.at(gf, (r0, c1), (1 - fr) * fc * g)
        np.add.at(gf, (r1, c0), fr * (1 - fc) * g)
        np.add.at(gf, (r1, c1), fr * fc * g)
        d_dr = ((1 - fc) * (f10 - f00) + fc * (f11 - f01)) * g
        d_dc = ((1 - fr) * (f01 - f00) + fr * (f11 - f10)) * g
        gc = np.concatenate([(d_dr * inside_r).sum(axis=1, keepdims=True),
                             (d_dc * inside_c).sum(axis=1, keepdims=True)], axis=1)
        return gf, gc

    return _make(out, "bilinear", (field, coords), grad_fn)


# --------------------------------------------------------------------- backward


@dataclass
class Gradients:
    """Gradient store keyed by node id."""

    by_id: dict[int, np.ndarray] = field(default_factory=dict)

    def of(self, t: Tensor) -> np.ndarray | None:
        return None if t.node is None else self.by_id.get(t.node.id)

    def of_or_zeros(self, t: Tensor) -> np.ndarray:
        g = self.of(t)
        return np.zeros(t.shape) if g is None else g


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode accumulation from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    store = Gradients()
    if loss.node is None:
        return store
    seen: dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p.node for p in node.parents if p.node is not None and p.node.id not in seen)
    grads = store.by_id
    grads[loss.node.id] = np.ones(loss.shape)
    for nid in sorted(seen, reverse=True):
        node = seen[nid]
        g = grads.get(nid)
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.node is None or pg is None:
                continue
            pid = parent.node.id
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)
    for nid, node in seen.items():
        if node.grad_fn is not None:
            grads.pop(nid, None)
    return store


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of a scalar function; ``indices`` restricts the probed entries."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)
