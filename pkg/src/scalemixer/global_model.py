"""ViT global forecaster: patch embedding, an M-layer encoder and a deconvolution head."""

from __future__ import annotations

import math

from .config import ModelConfig
from .nn import (
    INFERENCE,
    Context,
    ParamSpec,
    ParamView,
    block_layout,
    norm,
    norm_layout,
    transformer_block,
)
from .state import TokenSequence
from .tensor import (
    ContractError,
    GeometryError,
    Tensor,
    conv2d_patchify,
    deconv2d_unpatchify,
    gelu,
    reshape,
    slice_last,
)


def head_factors(patch: int) -> tuple[int, int]:
    """Split a patch size into two upsampling strides (outer, inner)."""
    inner = max(f for f in range(1, int(math.isqrt(patch)) + 1) if patch % f == 0)
    return patch // inner, inner


def global_layout(cfg: ModelConfig) -> list[ParamSpec]:
    P, C, d = cfg.patch, cfg.channels, cfg.d
    f1, f2 = head_factors(P)
    hid = cfg.global_head_hidden
    layout = [
        ParamSpec("global.embed.kernel", (P, P, C, d), ("normal", 1.0 / math.sqrt(P * P * C))),
        ParamSpec("global.embed.bias", (d,), ("zeros",)),
        ParamSpec("global.pos", (cfg.n_tokens, d), ("normal", 0.02)),
    ]
    for i in range(cfg.M):
        layout += block_layout(f"global.layer{i}", d, cfg.mlp_ratio)
    layout += norm_layout("global.head.ln", d)
    layout += [
        ParamSpec("global.head.deconv1.kernel", (d, f1, f1, hid), ("normal", 1.0 / math.sqrt(d))),
        ParamSpec("global.head.deconv1.bias", (hid,), ("zeros",)),
        ParamSpec("global.head.deconv2.kernel", (hid, f2, f2, cfg.pred_channels), ("zeros",)),
        ParamSpec("global.head.deconv2.bias", (cfg.pred_channels,), ("zeros",)),
    ]
    return layout


def global_patch_embed(state: Tensor, pv: ParamView, cfg: ModelConfig) -> TokenSequence:
    """H x W x C state -> N x d tokens with learned absolute positions."""
    if state.shape != (cfg.global_h, cfg.global_w, cfg.channels):
        raise GeometryError(f"global state {state.shape} does not match config")
    g = pv.scope("global")
    tokens = conv2d_patchify(state, g["embed.kernel"], g["embed.bias"], cfg.patch)
    return TokenSequence(tokens + g["pos"], cfg.token_grid)


def encode_range(S: TokenSequence, start: int, stop: int, pv: ParamView, cfg: ModelConfig,
                 ctx: Context = INFERENCE) -> TokenSequence:
    """Apply global encoder layers ``[start, stop)``."""
    if not 0 <= start <= stop <= cfg.M:
        raise ContractError(f"layer range [{start}, {stop}) outside [0, {cfg.M}]")
    x = S.tokens
    for i in range(start, stop):
        x = transformer_block(x, pv.scope(f"global.layer{i}"), cfg.heads, ctx, site="global_self")
    return S.with_tokens(x)


def global_prediction_head(S: TokenSequence, state: Tensor, pv: ParamView,
                           cfg: ModelConfig) -> Tensor:
    """Two-stage deconvolution back to H x W x C_pred, added to the input's dynamic channels."""
    if S.grid != cfg.token_grid:
        raise GeometryError(f"token grid {S.grid} != {cfg.token_grid}")
    h = pv.scope("global.head")
    f1, f2 = head_factors(cfg.patch)
    hr, hc = S.grid
    x = norm(S.tokens, h, "ln")
    x = gelu(deconv2d_unpatchify(x, h["deconv1.kernel"], f1, cfg.global_head_hidden, S.grid,
                                 h["deconv1.bias"]))
    x = reshape(x, (hr * f1 * hc * f1, cfg.global_head_hidden))
    delta = deconv2d_unpatchify(x, h["deconv2.kernel"], f2, cfg.pred_channels,
                                (hr * f1, hc * f1), h["deconv2.bias"])
    return slice_last(state, 0, cfg.pred_channels) + delta


def global_forward(state: Tensor, pv: ParamView, cfg: ModelConfig,
                   ctx: Context = INFERENCE) -> Tensor:
    S = global_patch_embed(state, pv, cfg)
    S = encode_range(S, 0, cfg.M, pv, cfg, ctx)
    return global_prediction_head(S, state, pv, cfg)
