"""Regional encoder, the ScaleMixer coupling block and lead-time prediction heads.

Parameter names:

* ``regional.*``    patch embedding, encoder layers, Fourier lead-time embedding, heads
* ``mixer{b}.*``    one ScaleMixer per coupling block ``b``
"""

from __future__ import annotations

import math

import numpy as np

from .config import N_FRAMES, ModelConfig
from .global_model import head_factors
from .nn import (
    INFERENCE,
    Context,
    FourierParams,
    ParamSpec,
    ParamView,
    ada_layer_norm,
    adaln_layout,
    attention_layout,
    block_layout,
    dense,
    fourier_layout,
    linear_layout,
    multi_head_attention,
    transformer_block,
)
from .state import KeyPositionSet, RegionalState, RegionGeometry, TokenSequence
from .tensor import (
    ContractError,
    GeometryError,
    Tensor,
    bilinear_sample,
    concat,
    conv2d_patchify,
    deconv2d_unpatchify,
    depthwise_conv3x3,
    gelu,
    mul,
    reshape,
    scatter_rows,
    slice_last,
    softmax_last_axis,
    take_rows,
)

LEAD_HOURS = tuple(range(1, N_FRAMES + 1))


# ---------------------------------------------------------------------- layout


def regional_layout(cfg: ModelConfig) -> list[ParamSpec]:
    p, V, d = cfg.regional_patch, cfg.n_regional_vars, cfg.d
    layout = [
        ParamSpec("regional.embed.kernel", (p, p, V, d), ("normal", 1.0 / math.sqrt(p * p * V))),
        ParamSpec("regional.embed.bias", (d,), ("zeros",)),
        ParamSpec("regional.fuse.w", (N_FRAMES * d, d), ("fuse_mean", N_FRAMES)),
        ParamSpec("regional.fuse.b", (d,), ("zeros",)),
        ParamSpec("regional.static.kernel", (p, p, 2, d), ("normal", 1.0 / math.sqrt(p * p * 2))),
        ParamSpec("regional.static.bias", (d,), ("zeros",)),
    ]
    layout += linear_layout("regional.time.fc1", 4, d) + linear_layout("regional.time.fc2", d, d)
    layout.append(ParamSpec("regional.pos", (cfg.n_regional_tokens, d), ("normal", 0.02)))
    for i in range(cfg.k):
        layout += block_layout(f"regional.layer{i}", d, cfg.mlp_ratio)
    layout += fourier_layout("regional.fourier", cfg.fourier)
    f1, f2 = head_factors(p)
    hid = cfg.regional_head_hidden
    for dt in LEAD_HOURS:
        name = f"regional.head{dt}"
        layout += adaln_layout(f"{name}.adaln", cfg.fourier, 2 * d)
        layout += [
            ParamSpec(f"{name}.deconv1.kernel", (2 * d, f1, f1, hid), ("normal", 1.0 / math.sqrt(2 * d))),
            ParamSpec(f"{name}.deconv1.bias", (hid,), ("zeros",)),
            ParamSpec(f"{name}.deconv2.kernel", (hid, f2, f2, V), ("zeros",)),
            ParamSpec(f"{name}.deconv2.bias", (V,), ("zeros",)),
        ]
    return layout


def mixer_layout(cfg: ModelConfig, block: int) -> list[ParamSpec]:
    d = cfg.d
    name = f"mixer{block}"
    layout = [
        ParamSpec(f"{name}.posid.conv.kernel", (3, 3, d), ("normal", 1.0 / 3.0)),
        ParamSpec(f"{name}.posid.conv.bias", (d,), ("zeros",)),
    ]
    layout += linear_layout(f"{name}.posid.proj", d, 1)
    layout += attention_layout(f"{name}.g2p", d + 2, d, d, d + 2)
    layout += linear_layout(f"{name}.refine", 2 * d, d)
    layout += attention_layout(f"{name}.p2r", d, d + 2, d, d)
    layout += linear_layout(f"{name}.adapter.fc1", 2 * d, d)
    layout += linear_layout(f"{name}.adapter.fc2", d, d, zero=True)
    return layout


# ---------------------------------------------------------------- embedding


def time_features(hour_of_day: float, day_of_year: float) -> np.ndarray:
    h = 2.0 * math.pi * hour_of_day / 24.0
    y = 2.0 * math.pi * day_of_year / 365.25
    return np.array([math.sin(h), math.cos(h), math.sin(y), math.cos(y)])


def regional_patch_embed(state: RegionalState, pv: ParamView, cfg: ModelConfig) -> TokenSequence:
    """Shared per-frame patchify, temporal fusion 6d -> d, plus static and clock conditioning."""
    if state.last.shape != (cfg.region_h, cfg.region_w, cfg.n_regional_vars):
        raise GeometryError(f"regional frames {state.last.shape} do not match config")
    r = pv.scope("regional")
    p = cfg.regional_patch
    frames = [conv2d_patchify(f, r["embed.kernel"], r["embed.bias"], p) for f in state.history]
    tokens = dense(concat(frames, axis=1), r, "fuse")
    static = np.concatenate([state.topography, state.land_sea_mask], axis=-1)
    tokens = tokens + conv2d_patchify(Tensor(static), r["static.kernel"], r["static.bias"], p)
    clock = Tensor(time_features(state.hour_of_day, state.day_of_year))
    tokens = tokens + dense(gelu(dense(clock, r, "time.fc1")), r, "time.fc2")
    return TokenSequence(tokens + r["pos"], cfg.regional_token_grid)


def regional_layer(s: TokenSequence, index: int, pv: ParamView, cfg: ModelConfig,
                   ctx: Context = INFERENCE) -> TokenSequence:
    x = transformer_block(s.tokens, pv.scope(f"regional.layer{index}"), cfg.heads, ctx,
                          site="regional_self")
    return s.with_tokens(x)


# -------------------------------------------------------------------- mixer


def lattice_index(grid: tuple[int, int], m: int) -> np.ndarray:
    """m evenly strided positions on a token grid, row-major."""
    rows, cols = grid
    best = None
    for mr in range(1, m + 1):
        if m % mr or mr > rows or m // mr > cols:
            continue
        mc = m // mr
        err = abs(math.log((mr / mc) / (rows / cols)))
        if best is None or err < best[0]:
            best = (err, mr, mc)
    if best is None:
        return np.floor((np.arange(m) + 0.5) * rows * cols / m).astype(np.intp)
    _, mr, mc = best
    r = np.floor((np.arange(mr) + 0.5) * rows / mr).astype(np.intp)
    c = np.floor((np.arange(mc) + 0.5) * cols / mc).astype(np.intp)
    return (r[:, None] * cols + c[None, :]).reshape(-1)


def top_m(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest scores, ties broken by the smaller index."""
    return np.argsort(-scores, kind="stable")[:m]


def importance_scores(S: TokenSequence, pv: ParamView) -> Tensor:
    """Softmax over all N tokens of a 3x3 depthwise conv + linear projection."""
    rows, cols = S.grid
    d = S.tokens.shape[1]
    grid = reshape(S.tokens, (rows, cols, d))
    feat = gelu(depthwise_conv3x3(grid, pv["posid.conv.kernel"], pv["posid.conv.bias"]))
    logits = dense(reshape(feat, (rows * cols, d)), pv, "posid.proj")
    return softmax_last_axis(reshape(logits, (rows * cols,)))


def identify_key_positions(S: TokenSequence, m: int, mode: str, pv: ParamView,
                           geom: RegionGeometry, rng: np.random.Generator | None = None
                           ) -> KeyPositionSet:
    N = S.tokens.shape[0]
    if m > N:
        raise ContractError(f"m={m} exceeds {N} tokens")
    if mode == "adaptive":
        probs = importance_scores(S, pv)
        index = top_m(probs.data, m)
    else:
        probs = Tensor(np.full(N, 1.0 / N))
        if mode == "random":
            if rng is None:
                raise ContractError("random sampling needs an explicit rng")
            index = rng.choice(N, size=m, replace=False)
        elif mode == "fixed_grid":
            index = lattice_index(S.grid, m)
        else:
            raise ContractError(f"unknown sampling mode {mode!r}")
    scores = take_rows(probs, index)
    embeddings = mul(reshape(scores, (m, 1)), take_rows(S.tokens, index))
    cols = S.grid[1]
    coords = geom.normalise(index // cols, index % cols)
    return KeyPositionSet(index, coords, scores, embeddings, probs)


def global_to_position(kps: KeyPositionSet, S: TokenSequence, pv: ParamView, heads: int,
                       ctx: Context = INFERENCE) -> tuple[Tensor, Tensor]:
    """Key positions (h || c) attend over all global tokens; residual update."""
    d = kps.embeddings.shape[1]
    query = concat([kps.embeddings, Tensor(kps.coords)], axis=1)
    updated = query + multi_head_attention(query, S.tokens, pv.attention("g2p", heads), ctx, "g2p")
    return slice_last(updated, 0, d), slice_last(updated, d, d + 2)


def refine_with_regional(h_global: Tensor, coords: Tensor, s: TokenSequence, geom: RegionGeometry,
                         pv: ParamView) -> Tensor:
    """h' = Linear(Bilinear(s, c') || h_global), sampling in regional token units (clamped)."""
    rows, cols = s.grid
    grid = reshape(s.tokens, (rows, cols, s.tokens.shape[1]))
    sampled = bilinear_sample(grid, geom.to_regional(coords))
    return dense(concat([sampled, h_global], axis=1), pv, "refine")


def position_to_regional(s: TokenSequence, h_ref: Tensor, coords: Tensor, pv: ParamView,
                         heads: int, ctx: Context = INFERENCE) -> TokenSequence:
    """Regional tokens attend over the refined key positions (h' || c'); residual update."""
    kv = concat([h_ref, coords], axis=1)
    out = s.tokens + multi_head_attention(s.tokens, kv, pv.attention("p2r", heads), ctx, "p2r")
    return s.with_tokens(out)


def adapt_global(S_aligned: Tensor, s_new: Tensor, pv: ParamView) -> Tensor:
    """S'' = S_aligned + MLP(S_aligned || s')."""
    if S_aligned.shape != s_new.shape:
        raise GeometryError(f"aligned tokens {S_aligned.shape} vs regional {s_new.shape}")
    hidden = gelu(dense(concat([S_aligned, s_new], axis=1), pv, "adapter.fc1"))
    return S_aligned + dense(hidden, pv, "adapter.fc2")


def scalemixer_forward(S: TokenSequence, s: TokenSequence, geom: RegionGeometry, sampling: str,
                       coupling: str, pv: ParamView, cfg: ModelConfig, ctx: Context = INFERENCE,
                       rng: np.random.Generator | None = None
                       ) -> tuple[TokenSequence, TokenSequence, KeyPositionSet]:
    """One bidirectional (or global-to-regional only) coupling step."""
    if coupling not in ("bidirectional", "unidirectional"):
        raise ContractError(f"scalemixer does not run with coupling={coupling!r}")
    kps = identify_key_positions(S, cfg.m, sampling, pv, geom, rng)
    h_global, coords = global_to_position(kps, S, pv, cfg.heads, ctx)
    h_ref = refine_with_regional(h_global, coords, s, geom, pv)
    s_new = position_to_regional(s, h_ref, coords, pv, cfg.heads, ctx)
    if coupling == "unidirectional":
        return S, s_new, kps
    index = geom.aligned_index
    S_aligned = adapt_global(take_rows(S.tokens, index), s_new.tokens, pv)
    return S.with_tokens(scatter_rows(S.tokens, index, S_aligned)), s_new, kps


# ---------------------------------------------------------------------- heads


def regional_prediction_head(s: TokenSequence, S_aligned: Tensor, dt: int, pv: ParamView,
                             fourier: FourierParams, last_frame: Tensor, cfg: ModelConfig) -> Tensor:
    """Lead-time head: AdaLN on (s || S_aligned), two deconvolutions, residual on the last frame."""
    if dt not in LEAD_HOURS:
        raise ContractError(f"lead time {dt} outside 1..{N_FRAMES}")
    h = pv.scope(f"regional.head{dt}")
    f1, f2 = head_factors(cfg.regional_patch)
    hid = cfg.regional_head_hidden
    rows, cols = s.grid
    x = ada_layer_norm(concat([s.tokens, S_aligned], axis=1), dt, fourier,
                       h["adaln.mlp.w"], h["adaln.mlp.b"])
    x = gelu(deconv2d_unpatchify(x, h["deconv1.kernel"], f1, hid, s.grid, h["deconv1.bias"]))
    x = reshape(x, (rows * f1 * cols * f1, hid))
    delta = deconv2d_unpatchify(x, h["deconv2.kernel"], f2, cfg.n_regional_vars,
                                (rows * f1, cols * f1), h["deconv2.bias"])
    return last_frame + delta
