"""Reusable layers built on :mod:`scalemixer.tensor`.

Parameters live in a flat ``dict[str, np.ndarray]`` store.  A model declares
its parameters as a *layout* (name, shape, initializer) so the same code can
allocate a desk-scale model or merely count a full-size one.  During a
forward pass a :class:`ParamView` hands out autodiff leaves, creating each
leaf once so that shared weights accumulate a single gradient.

Linear maps use the row-vector convention ``y = x @ W + b`` with ``W`` of
shape (in, out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Gradients,
    Tensor,
    concat,
    cos,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    silu,
    sin,
    slice_last,
    softmax_last_axis,
    transpose,
)

# ------------------------------------------------------------------ parameters


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: tuple  # ("normal", std) | ("zeros",) | ("ones",) | ("uniform", lo, hi) | ("fuse_mean", frames)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def allocate(layout: Iterable[ParamSpec], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Materialise a layout in declaration order (deterministic given ``rng``)."""
    store: dict[str, np.ndarray] = {}
    for spec in layout:
        if spec.name in store:
            raise ContractError(f"duplicate parameter {spec.name}")
        kind = spec.init[0]
        if kind == "normal":
            arr = rng.normal(0.0, spec.init[1], size=spec.shape)
        elif kind == "zeros":
            arr = np.zeros(spec.shape)
        elif kind == "ones":
            arr = np.ones(spec.shape)
        elif kind == "uniform":
            arr = rng.uniform(spec.init[1], spec.init[2], size=spec.shape)
        elif kind == "fuse_mean":
            frames = spec.init[1]
            d = spec.shape[1]
            arr = np.tile(np.eye(d) / frames, (frames, 1))
        else:
            raise ContractError(f"unknown initializer {kind!r}")
        store[spec.name] = np.asarray(arr, dtype=np.float64)
    return store


def count(layout: Iterable[ParamSpec]) -> int:
    return sum(spec.size for spec in layout)


def linear_layout(name: str, n_in: int, n_out: int, zero: bool = False) -> list[ParamSpec]:
    w_init = ("zeros",) if zero else ("normal", 1.0 / math.sqrt(n_in))
    return [ParamSpec(f"{name}.w", (n_in, n_out), w_init),
            ParamSpec(f"{name}.b", (n_out,), ("zeros",))]


def norm_layout(name: str, d: int) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.g", (d,), ("ones",)), ParamSpec(f"{name}.b", (d,), ("zeros",))]


def attention_layout(name: str, d_q: int, d_kv: int, d: int, d_out: int,
                     zero_out: bool = True) -> list[ParamSpec]:
    return (linear_layout(f"{name}.q", d_q, d) + linear_layout(f"{name}.k", d_kv, d)
            + linear_layout(f"{name}.v", d_kv, d) + linear_layout(f"{name}.o", d, d_out, zero_out))


def ffn_layout(name: str, d: int, ratio: int, zero_out: bool = True) -> list[ParamSpec]:
    return linear_layout(f"{name}.fc1", d, ratio * d) + linear_layout(f"{name}.fc2", ratio * d, d, zero_out)


def block_layout(name: str, d: int, ratio: int) -> list[ParamSpec]:
    return (norm_layout(f"{name}.ln1", d) + attention_layout(f"{name}.attn", d, d, d, d)
            + norm_layout(f"{name}.ln2", d) + ffn_layout(f"{name}.ffn", d, ratio))


def fourier_layout(name: str, dim: int) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.a", (dim // 2,), ("normal", 0.25)),
            ParamSpec(f"{name}.b", (dim // 2,), ("uniform", 0.0, 2.0 * math.pi))]


def adaln_layout(name: str, cond_dim: int, d: int) -> list[ParamSpec]:
    # SiLU -> Linear(cond -> 2d), zero so the block starts as plain layer norm
    return linear_layout(f"{name}.mlp", cond_dim, 2 * d, zero=True)


class ParamView:
    """Per-forward binding of a parameter store to autodiff leaves."""

    def __init__(self, store: dict[str, np.ndarray],
                 trainable: Callable[[str], bool] | None = None,
                 prefix: str = "", _leaves: dict[str, Tensor] | None = None):
        self.store = store
        self.trainable = trainable
        self.prefix = prefix
        self._leaves = {} if _leaves is None else _leaves

    def __getitem__(self, name: str) -> Tensor:
        full = self.prefix + name
        leaf = self._leaves.get(full)
        if leaf is None:
            arr = self.store[full].view()
            grad = self.trainable(full) if self.trainable is not None else False
            leaf = Tensor(arr, requires_grad=grad, _raw=True)
            self._leaves[full] = leaf
        return leaf

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.store

    def scope(self, name: str) -> "ParamView":
        return ParamView(self.store, self.trainable, f"{self.prefix}{name}.", self._leaves)

    def attention(self, name: str, heads: int) -> "AttentionParams":
        s = self.scope(name)
        return AttentionParams(s["q.w"], s["q.b"], s["k.w"], s["k.b"], s["v.w"], s["v.b"],
                               s["o.w"], s["o.b"], heads)

    def fourier(self, name: str) -> "FourierParams":
        s = self.scope(name)
        return FourierParams(s["a"], s["b"])

    def gradients(self, grads: Gradients) -> dict[str, np.ndarray]:
        """Gradients for every trainable leaf touched in this pass (zeros if unreachable)."""
        out = {}
        for name, leaf in self._leaves.items():
            if leaf.requires_grad:
                out[name] = grads.of_or_zeros(leaf)
        return out


# ---------------------------------------------------------------------- context


@dataclass
class Context:
    """Per-forward switches: train-time regularisation and optional probes."""

    train: bool = False
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    drop_path: float = 0.0
    attn_scale: str = "per_head"
    probe: dict[str, list[np.ndarray]] | None = None

    def record(self, site: str, value: np.ndarray) -> None:
        if self.probe is not None:
            self.probe.setdefault(site, []).append(value)

    def _mask(self, shape, rate: float) -> np.ndarray | None:
        if not self.train or rate <= 0.0:
            return None
        if self.rng is None:
            raise ContractError("train-time dropout needs an rng")
        keep = self.rng.random(shape) >= rate
        return keep / (1.0 - rate)

    def apply_dropout(self, x: Tensor) -> Tensor:
        mask = self._mask(x.shape, self.dropout)
        return x if mask is None else mul(x, mask)

    def apply_drop_path(self, branch: Tensor) -> Tensor:
        mask = self._mask((1,) * branch.ndim, self.drop_path)
        return branch if mask is None else mul(branch, mask)


INFERENCE = Context()


# ------------------------------------------------------------------------ layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), w), (w.shape[1],))
    return y if b is None else y + b


def dense(x: Tensor, pv: ParamView, name: str) -> Tensor:
    return linear(x, pv[f"{name}.w"], pv[f"{name}.b"])


def norm(x: Tensor, pv: ParamView, name: str) -> Tensor:
    return layer_norm(x, pv[f"{name}.g"], pv[f"{name}.b"])


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[1]
        if d % self.heads:
            raise ContractError(f"width {d} not divisible by {self.heads} heads")


def attention_weights(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
                      scale: str = "per_head") -> tuple[Tensor, Tensor]:
    """Per-head softmax weights (heads x n_q x n_k) and the projected values."""
    if kv_in.shape[0] < 1:
        raise ContractError("attention needs at least one key")
    h = params.heads
    d = params.w_q.shape[1]
    dh = d // h
    n_q, n_k = q_in.shape[0], kv_in.shape[0]
    q = transpose(reshape(linear(q_in, params.w_q, params.b_q), (n_q, h, dh)), (1, 0, 2))
    k = transpose(reshape(linear(kv_in, params.w_k, params.b_k), (n_k, h, dh)), (1, 2, 0))
    v = transpose(reshape(linear(kv_in, params.w_v, params.b_v), (n_k, h, dh)), (1, 0, 2))
    factor = 1.0 / math.sqrt(dh if scale == "per_head" else d)
    weights = softmax_last_axis(mul(matmul(q, k), factor))
    return weights, v


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
                         ctx: Context = INFERENCE, site: str | None = None) -> Tensor:
    """Scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    Heads are concatenated and projected by ``w_o``.  ``ctx.attn_scale``
    picks 1/sqrt(d_head) (``per_head``) or 1/sqrt(d) (``full_dim``).
    """
    weights, v = attention_weights(q_in, kv_in, params, ctx.attn_scale)
    if site is not None:
        ctx.record(site, weights.data)
    n_q = q_in.shape[0]
    d = params.w_q.shape[1]
    heads_out = reshape(transpose(matmul(weights, v), (1, 0, 2)), (n_q, d))
    return linear(ctx.apply_dropout(heads_out), params.w_o, params.b_o)


def feed_forward(x: Tensor, pv: ParamView, ctx: Context = INFERENCE) -> Tensor:
    """d -> ratio*d -> d with GELU; the residual is added by the caller."""
    hidden = gelu(dense(x, pv, "fc1"))
    return dense(ctx.apply_dropout(hidden), pv, "fc2")


def transformer_block(x: Tensor, pv: ParamView, heads: int, ctx: Context = INFERENCE,
                      site: str | None = None) -> Tensor:
    """Pre-norm encoder layer: x + Attn(LN(x)), then + FFN(LN(.))."""
    h = norm(x, pv, "ln1")
    x = x + ctx.apply_drop_path(multi_head_attention(h, h, pv.attention("attn", heads), ctx, site))
    h = norm(x, pv, "ln2")
    return x + ctx.apply_drop_path(feed_forward(h, pv.scope("ffn"), ctx))


@dataclass
class FourierParams:
    a: Tensor  # frequencies
    b: Tensor  # phases

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise DimensionError("Fourier frequencies and phases differ in length")


def fourier_embed(dt: float, params: FourierParams) -> Tensor:
    """[cos(2*pi*a*dt + b) ..., sin(2*pi*a*dt + b) ...] -- all cosines first."""
    theta = mul(params.a, 2.0 * math.pi * float(dt)) + params.b
    return concat([cos(theta), sin(theta)], axis=0)


def ada_layer_norm(x: Tensor, dt: float, fourier: FourierParams, w: Tensor, b: Tensor) -> Tensor:
    """(1 + gamma) * LN(x) + beta with gamma, beta = Linear(SiLU(FourierEmbed(dt))).

    The first half of the conditioning output is gamma, the second beta.
    """
    d = x.shape[-1]
    if w.shape[1] != 2 * d:
        raise DimensionError(f"conditioning output {w.shape[1]} != 2*{d}")
    mod = linear(silu(fourier_embed(dt, fourier)), w, b)
    gamma = slice_last(mod, 0, d)
    beta = slice_last(mod, d, 2 * d)
    normed = layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))
    return mul(normed, gamma + 1.0) + beta

