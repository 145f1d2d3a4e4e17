"""Finite-difference verification of every differentiable site.

Each site builds random inputs and a scalar function of named tensors.  The
check compares reverse-mode gradients with central differences using the
relative error ``|analytic - numeric| / max(|analytic|, 1)``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import nn, tensor as T
from .config import ModelConfig
from .coupled import build_model, forward_step, global_weighted_mae, regional_step_loss
from .global_model import global_forward
from .nn import Context, ParamView
from .regional import (
    adapt_global,
    global_to_position,
    identify_key_positions,
    importance_scores,
    mixer_layout,
    position_to_regional,
    refine_with_regional,
    scalemixer_forward,
)
from .state import KeyPositionSet, RegionalState, RegionGeometry, TokenSequence

DEFAULT_TOL = 1e-4
EPS = 1e-5

Builder = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable[[dict[str, T.Tensor]], T.Tensor]]]


@dataclass(frozen=True)
class Site:
    name: str
    build: Builder
    kind: str = "op"  # op | layer
    max_entries: int = 64  # probed entries per input


def _project(out: T.Tensor, rng: np.random.Generator) -> Callable[[T.Tensor], T.Tensor]:
    """Fixed random linear functional, so no gradient is trivially symmetric."""
    w = rng.normal(size=out.shape)
    return lambda y: T.sum_(T.mul(y, w))


def _scalar(fn: Callable[[dict[str, T.Tensor]], T.Tensor], inputs: dict[str, np.ndarray],
            rng: np.random.Generator) -> Callable[[dict[str, T.Tensor]], T.Tensor]:
    probe = fn({k: T.Tensor(v) for k, v in inputs.items()})
    proj = _project(probe, rng)
    return lambda xs: proj(fn(xs))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1.0)))


def check(inputs: dict[str, np.ndarray], fn: Callable[[dict[str, T.Tensor]], T.Tensor],
          rng: np.random.Generator, eps: float = EPS, max_entries: int = 64) -> float:
    """Worst relative error over (a random subset of) every input's entries."""
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    grads = T.backward(fn(leaves))
    worst = 0.0
    for name, value in inputs.items():
        n = value.size
        idx = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))

        def f(x, name=name):
            xs = {k: T.Tensor(x if k == name else v) for k, v in inputs.items()}
            return fn(xs).item()

        numeric = T.finite_diff_grad(f, value, eps, idx).reshape(-1)[idx]
        analytic = grads.of_or_zeros(leaves[name]).reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------- op sites


def _unary(op, lo=-2.0, hi=2.0):
    def build(rng):
        x = rng.uniform(lo, hi, size=(rng.integers(1, 5), rng.integers(1, 9)))
        return {"x": x}, lambda t: op(t["x"])
    return build


def _binary(op):
    def build(rng):
        shape = (rng.integers(1, 5), rng.integers(1, 9))
        b_shape = shape if rng.random() < 0.5 else (1, shape[1])
        return ({"a": rng.normal(size=shape), "b": rng.normal(size=b_shape)},
                lambda t: op(t["a"], t["b"]))
    return build


def _abs_build(rng):
    x = rng.normal(size=(3, 5))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # stay away from the kink
    return {"x": x}, lambda t: T.abs_(t["x"])


def _matmul_build(rng):
    m, k, n = rng.integers(1, 6, size=3)
    return ({"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))},
            lambda t: T.matmul(t["a"], t["b"]))


def _bmm_build(rng):
    h, m, k, n = rng.integers(1, 4, size=4)
    return ({"a": rng.normal(size=(h, m, k)), "b": rng.normal(size=(h, k, n))},
            lambda t: T.matmul(t["a"], t["b"]))


def _reduce_build(rng):
    x = rng.normal(size=(3, 4, 2))
    axis = [None, 0, 1, 2, (0, 1)][rng.integers(5)]
    return {"x": x}, lambda t: T.mean(T.sum_(t["x"], axis=axis, keepdims=True), axis=None)


def _structure_build(rng):
    x = rng.normal(size=(4, 6))
    y = rng.normal(size=(4, 2))
    idx = rng.permutation(4)[:2]

    def fn(t):
        z = T.reshape(T.transpose(T.reshape(t["x"], (4, 3, 2)), (1, 0, 2)), (4, 6))
        z = T.slice_last(T.concat([z, t["y"]], axis=1), 1, 7)
        return T.scatter_rows(z, idx, T.mul(T.take_rows(z, idx[::-1]), 2.0))

    return {"x": x, "y": y}, fn


def _softmax_build(rng):
    x = rng.normal(scale=2.0, size=(rng.integers(1, 5), rng.integers(1, 9)))
    return {"x": x}, lambda t: T.softmax_last_axis(t["x"])


def _layer_norm_build(rng):
    d = int(rng.integers(2, 9))
    return ({"x": rng.normal(size=(3, d)), "g": rng.normal(size=d), "b": rng.normal(size=d)},
            lambda t: T.layer_norm(t["x"], t["g"], t["b"]))


def _patchify_build(rng):
    P, C, d = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    hp, wp = rng.integers(1, 3, size=2)
    return ({"field": rng.normal(size=(hp * P, wp * P, C)), "kernel": rng.normal(size=(P, P, C, d)),
             "bias": rng.normal(size=d)},
            lambda t: T.conv2d_patchify(t["field"], t["kernel"], t["bias"], P))


def _unpatchify_build(rng):
    P, C, d = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    hp, wp = (int(v) for v in rng.integers(1, 3, size=2))
    return ({"tokens": rng.normal(size=(hp * wp, d)), "kernel": rng.normal(size=(d, P, P, C)),
             "bias": rng.normal(size=C)},
            lambda t: T.deconv2d_unpatchify(t["tokens"], t["kernel"], P, C, (hp, wp), t["bias"]))


def _dwconv_build(rng):
    h, w, c = (int(v) for v in rng.integers(1, 5, size=3))
    return ({"x": rng.normal(size=(h, w, c)), "k": rng.normal(size=(3, 3, c)), "b": rng.normal(size=c)},
            lambda t: T.depthwise_conv3x3(t["x"], t["k"], t["b"]))


def _bilinear_build(rng):
    h, w, d = (int(v) for v in rng.integers(2, 5, size=3))
    m = int(rng.integers(1, 5))
    # interior, away from integer kinks
    coords = np.stack([rng.uniform(0, h - 1, m), rng.uniform(0, w - 1, m)], axis=1)
    frac = coords - np.floor(coords)
    coords = np.where((frac < 1e-3) | (frac > 1 - 1e-3), np.floor(coords) + 0.5, coords)
    coords = np.clip(coords, 0.01, np.array([h - 1.01, w - 1.01]))
    return ({"field": rng.normal(size=(h, w, d)), "coords": coords},
            lambda t: T.bilinear_sample(t["field"], t["coords"]))


OP_SITES = [
    Site("add", _binary(T.add)),
    Site("sub", _binary(T.sub)),
    Site("mul", _binary(T.mul)),
    Site("abs", _abs_build),
    Site("sin", _unary(T.sin)),
    Site("cos", _unary(T.cos)),
    Site("gelu", _unary(T.gelu, -4, 4)),
    Site("silu", _unary(T.silu, -4, 4)),
    Site("sum_mean", _reduce_build),
    Site("structure", _structure_build),
    Site("matmul", _matmul_build),
    Site("batched_matmul", _bmm_build),
    Site("softmax_last_axis", _softmax_build),
    Site("layer_norm", _layer_norm_build),
    Site("conv2d_patchify", _patchify_build),
    Site("deconv2d_unpatchify", _unpatchify_build),
    Site("depthwise_conv3x3", _dwconv_build),
    Site("bilinear_sample", _bilinear_build),
]


# --------------------------------------------------------------- layer sites


def _params(rng, layout) -> dict[str, np.ndarray]:
    """Allocate a layout and perturb every entry so no branch is trivially zero."""
    store = nn.allocate(layout, rng)
    return {k: v + 0.3 * rng.normal(size=v.shape) for k, v in store.items()}


def _view(t: dict[str, T.Tensor], prefix: str = "") -> ParamView:
    return ParamView({k: v.data for k, v in t.items()}, prefix=prefix, _leaves=dict(t))


def _linear_build(rng):
    n_in, n_out = (int(v) for v in rng.integers(1, 6, size=2))
    p = _params(rng, nn.linear_layout("lin", n_in, n_out))
    p["x"] = rng.normal(size=(3, n_in))
    return p, lambda t: nn.dense(t["x"], _view(t), "lin")


def _attention_build(site: str, d_q: int, d_kv: int, d_out: int, heads: int, n_q: int, n_k: int,
                     scale: str = "per_head"):
    def build(rng):
        d = 4 * heads
        p = _params(rng, nn.attention_layout("att", d_q or d, d_kv or d, d, d_out or d))
        p["q_in"] = rng.normal(size=(n_q, d_q or d))
        p["kv_in"] = rng.normal(size=(n_k, d_kv or d))
        ctx = Context(attn_scale=scale)
        return p, lambda t: nn.multi_head_attention(t["q_in"], t["kv_in"], _view(t).attention("att", heads),
                                                    ctx, site)
    return build


def _ffn_build(rng):
    p = _params(rng, nn.ffn_layout("ffn", 4, 4))
    p["x"] = rng.normal(size=(3, 4))
    return p, lambda t: nn.feed_forward(t["x"], _view(t).scope("ffn"))


def _block_build(rng):
    p = _params(rng, nn.block_layout("blk", 8, 2))
    p["x"] = rng.normal(size=(5, 8))
    return p, lambda t: nn.transformer_block(t["x"], _view(t).scope("blk"), 2)


def _fourier_build(rng):
    p = _params(rng, nn.fourier_layout("f", 8))
    dt = float(rng.integers(1, 7))
    return p, lambda t: nn.fourier_embed(dt, _view(t).fourier("f"))


def _adaln_build(rng):
    p = _params(rng, nn.fourier_layout("f", 6) + nn.adaln_layout("ada", 6, 4))
    p["x"] = rng.normal(size=(3, 4))
    dt = float(rng.integers(1, 7))
    return p, lambda t: nn.ada_layer_norm(t["x"], dt, _view(t).fourier("f"), t["ada.mlp.w"], t["ada.mlp.b"])


# --------------------------------------------------------- scalemixer sites

_TOY_GRID = (3, 4)
_REG_GRID = (2, 2)
_TOY_GEOM = RegionGeometry(global_grid=_TOY_GRID, regional_grid=_REG_GRID, offset=(1, 1))
_N = _TOY_GRID[0] * _TOY_GRID[1]


def _interior_coords(rng, m: int) -> np.ndarray:
    """Normalised coords that land strictly inside the toy region, away from cell edges."""
    return np.stack([rng.uniform(0.55, 0.95, m), rng.uniform(0.38, 0.62, m)], axis=1)


def _toy_mixer_params(rng, d: int):
    return _params(rng, mixer_layout(replace(ModelConfig(), d=d, heads=2, m=3), 0))


def _importance_build(rng):
    d = 4
    p = _toy_mixer_params(rng, d)
    p["S"] = rng.normal(size=(_N, d))
    return p, lambda t: importance_scores(TokenSequence(t["S"], _TOY_GRID), _view(t, "mixer0."))


def _kps(t, m=3) -> KeyPositionSet:
    pv = _view(t, "mixer0.")
    S = TokenSequence(t["S"], _TOY_GRID)
    return identify_key_positions(S, m, "adaptive", pv, _TOY_GEOM)


def _g2p_build(rng):
    d = 4
    p = _toy_mixer_params(rng, d)
    p["S"] = rng.normal(size=(_N, d))

    def fn(t):
        kps = _kps(t)
        h, c = global_to_position(kps, TokenSequence(t["S"], _TOY_GRID), _view(t, "mixer0."), 2)
        return T.concat([h, c], axis=1)

    return p, fn


def _refine_build(rng):
    d = 4
    p = _toy_mixer_params(rng, d)
    p["h"] = rng.normal(size=(3, d))
    p["s"] = rng.normal(size=(4, d))
    p["c"] = _interior_coords(rng, 3)
    return p, lambda t: refine_with_regional(t["h"], t["c"], TokenSequence(t["s"], _REG_GRID), _TOY_GEOM,
                                             _view(t, "mixer0."))


def _p2r_build(rng):
    d = 4
    p = _toy_mixer_params(rng, d)
    p["h"] = rng.normal(size=(3, d))
    p["s"] = rng.normal(size=(4, d))
    p["c"] = rng.uniform(size=(3, 2))
    return p, lambda t: position_to_regional(TokenSequence(t["s"], _REG_GRID), t["h"], t["c"],
                                             _view(t, "mixer0."), 2).tokens


def _adapter_build(rng):
    d = 4
    p = _toy_mixer_params(rng, d)
    p["S_aligned"] = rng.normal(size=(4, d))
    p["s"] = rng.normal(size=(4, d))
    return p, lambda t: adapt_global(t["S_aligned"], t["s"], _view(t, "mixer0."))


def _mixer_build(rng):
    d = 4
    cfg = replace(ModelConfig(), d=d, heads=2, m=3)
    p = _toy_mixer_params(rng, d)
    p["S"] = rng.normal(size=(_N, d))
    p["s"] = rng.normal(size=(4, d))

    def fn(t):
        S2, s2, _ = scalemixer_forward(TokenSequence(t["S"], _TOY_GRID), TokenSequence(t["s"], _REG_GRID),
                                       _TOY_GEOM, "adaptive", "bidirectional", _view(t, "mixer0."), cfg)
        return T.concat([S2.tokens, s2.tokens], axis=0)

    return p, fn


LAYER_SITES = [
    Site("linear", _linear_build, "layer", 8),
    Site("attention.global_self", _attention_build("global_self", 0, 0, 0, 2, 5, 5), "layer", 8),
    Site("attention.regional_self", _attention_build("regional_self", 0, 0, 0, 2, 3, 3), "layer", 8),
    Site("attention.g2p", _attention_build("g2p", 10, 8, 10, 2, 3, 5), "layer", 8),
    Site("attention.p2r", _attention_build("p2r", 8, 10, 8, 2, 4, 3), "layer", 8),
    Site("attention.full_dim_scale", _attention_build("global_self", 0, 0, 0, 2, 3, 4, "full_dim"), "layer", 8),
    Site("feed_forward", _ffn_build, "layer", 8),
    Site("transformer_block", _block_build, "layer", 8),
    Site("fourier_embed", _fourier_build, "layer", 8),
    Site("ada_layer_norm", _adaln_build, "layer", 8),
    Site("scalemixer.importance", _importance_build, "layer", 8),
    Site("scalemixer.glo_to_pos", _g2p_build, "layer", 8),
    Site("scalemixer.refine", _refine_build, "layer", 8),
    Site("scalemixer.pos_to_reg", _p2r_build, "layer", 8),
    Site("scalemixer.adapter", _adapter_build, "layer", 8),
    Site("scalemixer.forward", _mixer_build, "layer", 8),
]


# --------------------------------------------------------------- model sites


def model_inputs(cfg: ModelConfig, rng: np.random.Generator) -> tuple[np.ndarray, RegionalState]:
    U = rng.normal(size=(cfg.global_h, cfg.global_w, cfg.channels))
    hist = [rng.normal(size=(cfg.region_h, cfg.region_w, cfg.n_regional_vars)) for _ in range(6)]
    topo = rng.uniform(size=(cfg.region_h, cfg.region_w, 1))
    lsm = (rng.uniform(size=(cfg.region_h, cfg.region_w, 1)) > 0.5).astype(np.float64)
    return U, RegionalState(hist, topo, lsm, 6.0, 120.0)


def perturbed_model(cfg: ModelConfig, seed: int, scale: float = 0.05) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 99])
    store = build_model(cfg, seed)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in sorted(store.items())}


def check_model(cfg: ModelConfig, seed: int, eps: float = EPS, per_param: int = 2) -> dict[str, float]:
    """End-to-end check of the coupled model: ``per_param`` random entries of every parameter.

    Returns the worst relative error per parameter group (first name component).
    """
    cfg = replace(cfg, dropout=0.0, drop_path=0.0)
    rng = np.random.default_rng([seed, 5])
    store = perturbed_model(cfg, seed)
    U, r = model_inputs(cfg, rng)
    g_target = rng.normal(size=(cfg.global_h, cfg.global_w, cfg.pred_channels))
    r_targets = [rng.normal(size=r.last.shape) for _ in range(6)]
    ctx = Context(attn_scale=cfg.attn_scale)

    def loss(pv):
        b = forward_step(T.Tensor(U), r, pv, cfg, ctx)
        return regional_step_loss(b, r_targets) + global_weighted_mae(b.global_pred, g_target, cfg)

    pv = ParamView(store, lambda name: True)
    grads = pv.gradients(T.backward(loss(pv)))
    worst: dict[str, float] = {}
    for name in sorted(store):
        value = store[name]
        idx = rng.choice(value.size, min(per_param, value.size), replace=False)

        def f(x, name=name):
            trial = dict(store)
            trial[name] = x
            return loss(ParamView(trial)).item()

        numeric = T.finite_diff_grad(f, value, eps, idx).reshape(-1)[idx]
        analytic = grads.get(name, np.zeros(value.shape)).reshape(-1)[idx]
        group = ".".join(name.split(".")[:2])
        worst[group] = max(worst.get(group, 0.0), relative_error(analytic, numeric))
    return worst


def check_global_model(cfg: ModelConfig, seed: int, eps: float = EPS, per_param: int = 2) -> float:
    """Spot check of the standalone global forward (patch-embed kernel included)."""
    rng = np.random.default_rng([seed, 6])
    store = perturbed_model(cfg, seed)
    U = rng.normal(size=(cfg.global_h, cfg.global_w, cfg.channels))
    target = rng.normal(size=(cfg.global_h, cfg.global_w, cfg.pred_channels))
    ctx = Context(attn_scale=cfg.attn_scale)
    names = [n for n in sorted(store) if n.startswith("global.")]

    def loss(pv):
        return global_weighted_mae(global_forward(T.Tensor(U), pv, cfg, ctx), target, cfg)

    pv = ParamView(store, lambda name: True)
    grads = pv.gradients(T.backward(loss(pv)))
    worst = 0.0
    for name in names:
        idx = rng.choice(store[name].size, min(per_param, store[name].size), replace=False)

        def f(x, name=name):
            trial = dict(store)
            trial[name] = x
            return loss(ParamView(trial)).item()

        numeric = T.finite_diff_grad(f, store[name], eps, idx).reshape(-1)[idx]
        worst = max(worst, relative_error(grads[name].reshape(-1)[idx], numeric))
    return worst


def run_site(site: Site, seeds, eps: float = EPS) -> float:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([seed, zlib.crc32(site.name.encode())])
        inputs, fn = site.build(rng)
        scalar = _scalar(fn, inputs, rng)
        err = check(inputs, scalar, rng, eps, site.max_entries)
        if not math.isfinite(err):
            return float("inf")
        worst = max(worst, err)
    return worst


ALL_SITES = OP_SITES + LAYER_SITES
