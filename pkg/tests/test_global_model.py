import numpy as np
import pytest

from conftest import TOY, randomized
from scalemixer.config import DESK, FULL_SCALE
from scalemixer.coupled import build_model, parameter_counts
from scalemixer.global_model import (
    encode_range,
    global_forward,
    global_layout,
    global_patch_embed,
    global_prediction_head,
    head_factors,
)
from scalemixer.gradcheck import check_global_model
from scalemixer.nn import ParamView, count
from scalemixer.tensor import ContractError, GeometryError, Tensor


@pytest.fixture
def store():
    return randomized(build_model(TOY, 0), seed=3, scale=0.2)


@pytest.fixture
def state(rng):
    return Tensor(rng.normal(size=(TOY.global_h, TOY.global_w, TOY.channels)))


def test_patch_embed_shapes():
    store = build_model(DESK, 0)
    S = global_patch_embed(Tensor(np.zeros((32, 64, 8))), ParamView(store), DESK)
    assert S.tokens.shape == (128, 32) and S.grid == (8, 16)


def test_full_scale_token_count():
    assert FULL_SCALE.n_tokens == 28800


def test_zero_embed_gives_zero_tokens(state):
    store = {k: np.zeros_like(v) for k, v in build_model(TOY, 0).items()}
    S = global_patch_embed(state, ParamView(store), TOY)
    np.testing.assert_array_equal(S.tokens.data, 0.0)


def test_patch_embed_geometry_error():
    with pytest.raises(GeometryError):
        global_patch_embed(Tensor(np.zeros((9, 12, TOY.channels))), ParamView(build_model(TOY, 0)), TOY)


def test_encode_range_empty_and_composition(store, state):
    pv = ParamView(store)
    S = global_patch_embed(state, pv, TOY)
    assert encode_range(S, 0, 0, pv, TOY).tokens is S.tokens
    split = encode_range(encode_range(S, 0, 2, pv, TOY), 2, 4, pv, TOY)
    np.testing.assert_array_equal(split.tokens.data, encode_range(S, 0, 4, pv, TOY).tokens.data)


def test_encode_range_bounds(store, state):
    pv = ParamView(store)
    S = global_patch_embed(state, pv, TOY)
    with pytest.raises(ContractError):
        encode_range(S, 2, 1, pv, TOY)
    with pytest.raises(ContractError):
        encode_range(S, 0, TOY.M + 1, pv, TOY)


def test_zero_layers_are_identity(store, state):
    zeroed = {k: (np.zeros_like(v) if ".layer" in k else v) for k, v in store.items()}
    pv = ParamView(zeroed)
    S = global_patch_embed(state, pv, TOY)
    np.testing.assert_array_equal(encode_range(S, 0, TOY.M, pv, TOY).tokens.data, S.tokens.data)


def test_head_shape_and_static_exclusion(store, state):
    pv = ParamView(store)
    S = encode_range(global_patch_embed(state, pv, TOY), 0, TOY.M, pv, TOY)
    out = global_prediction_head(S, state, pv, TOY)
    assert out.shape == (8, 12, TOY.pred_channels)
    assert DESK.pred_channels == 6


def test_head_zero_deconv_returns_input(state):
    pv = ParamView(build_model(TOY, 0))  # deconv2 is zero-initialised
    S = global_patch_embed(state, pv, TOY)
    out = global_prediction_head(S, state, pv, TOY)
    np.testing.assert_array_equal(out.data, state.data[..., :TOY.pred_channels])


def test_forward_is_manual_composition_and_deterministic(store, state):
    pv = ParamView(store)
    manual = global_prediction_head(encode_range(global_patch_embed(state, pv, TOY), 0, TOY.M, pv, TOY),
                                    state, pv, TOY)
    a = global_forward(state, pv, TOY).data
    np.testing.assert_array_equal(a, manual.data)
    np.testing.assert_array_equal(a, global_forward(state, ParamView(store), TOY).data)


def test_forward_gradient_reaches_patch_kernel():
    assert check_global_model(TOY, seed=2, per_param=3) <= 1e-4


def test_head_factors():
    assert head_factors(4) == (2, 2)
    assert head_factors(20) == (5, 4)
    assert head_factors(6) == (3, 2)
    for p in range(1, 31):
        a, b = head_factors(p)
        assert a * b == p


def test_global_count_matches_layout():
    assert parameter_counts(TOY)["global"] == count(global_layout(TOY))
    assert sum(v.size for k, v in build_model(TOY, 0).items() if k.startswith("global.")) == \
        parameter_counts(TOY)["global"]
