import dataclasses
import time

import numpy as np
import pytest

from conftest import TOY, randomized
from scalemixer import tensor as T
from scalemixer.config import DESK, FULL_SCALE, ConfigError
from scalemixer.coupled import (
    advance_clock,
    build_model,
    channel_loss_weights,
    forward_step,
    global_weighted_mae,
    is_regional_param,
    next_inputs,
    parameter_counts,
    regional_mae,
    regional_step_loss,
    rollout,
)
from scalemixer.gradcheck import model_inputs
from scalemixer.nn import ParamView
from scalemixer.tensor import ContractError, DimensionError, Tensor


def naive_global_loss(pred, truth, cfg):
    """Surface and upper-air terms written out variable by variable."""
    err = np.abs(pred - truth)
    total = 0.0
    w_up, w_sf = cfg.w_upper(), cfg.w_surface()
    for k in range(cfg.n_upper_vars):
        acc = 0.0
        for p in range(cfg.n_levels):
            c = k * cfg.n_levels + p
            acc += w_up[c] * err[:, :, c].mean()
        total += acc / cfg.n_levels
    off = cfg.n_upper_vars * cfg.n_levels
    for k in range(cfg.n_surface):
        total += w_sf[k] * err[:, :, off + k].mean()
    return total / (cfg.n_surface + cfg.n_upper_vars)


# -------------------------------------------------------------------- build


def test_build_is_deterministic():
    a, b = build_model(TOY, 3), build_model(TOY, 3)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(TOY, 4)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_desk_builds_quickly():
    start = time.perf_counter()
    store = build_model(DESK, 0)
    assert time.perf_counter() - start < 1.0
    assert sum(v.size for v in store.values()) == parameter_counts(DESK)["total"]


def test_full_scale_counts():
    counts = parameter_counts(FULL_SCALE)
    assert abs(counts["total"] - 1.07e9) / 1.07e9 <= 0.05
    assert abs(counts["global"] - 736e6) / 736e6 <= 0.05


def test_no_mixer_parameters_without_coupling():
    cfg = dataclasses.replace(TOY, coupling="none")
    assert parameter_counts(cfg)["mixer"] == 0
    assert not any(k.startswith("mixer") for k in build_model(cfg, 0))


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        build_model(dataclasses.replace(TOY, M=5), 0)


# ------------------------------------------------------------------ forward


def test_desk_bundle_shapes(rng):
    U, r = model_inputs(DESK, rng)
    bundle = forward_step(Tensor(U), r, build_model(DESK, 0), DESK)
    assert bundle.global_pred.shape == (32, 64, 6)
    assert [f.shape for f in bundle.regional] == [(40, 60, 7)] * 6


@pytest.mark.parametrize("coupling", ["bidirectional", "unidirectional", "none"])
def test_identity_at_init(rng, coupling):
    cfg = dataclasses.replace(TOY, coupling=coupling)
    U, r = model_inputs(cfg, rng)
    bundle = forward_step(Tensor(U), r, build_model(cfg, 0), cfg)
    np.testing.assert_array_equal(bundle.global_pred.data, U[:, :, :cfg.pred_channels])
    for f in bundle.regional:
        np.testing.assert_array_equal(f.data, r.last.data)


def test_rollout_identity_for_48_hours(rng):
    U, r = model_inputs(TOY, rng)
    out = rollout(Tensor(U), r, 8, build_model(TOY, 0), TOY)
    fields = [f for b in out for f in b.regional]
    assert len(fields) == 48
    for f in fields:
        np.testing.assert_array_equal(f.data, r.last.data)


def test_rollout_one_step_equals_forward_step(rng):
    store = randomized(build_model(TOY, 0), seed=2, scale=0.05)
    U, r = model_inputs(TOY, rng)
    a = forward_step(Tensor(U), r, store, TOY)
    (b,) = rollout(Tensor(U), r, 1, store, TOY)
    np.testing.assert_array_equal(a.global_pred.data, b.global_pred.data)
    for x, y in zip(a.regional, b.regional):
        np.testing.assert_array_equal(x.data, y.data)


def test_rollout_feeds_predictions_back(rng):
    store = randomized(build_model(TOY, 0), seed=2, scale=0.05)
    U, r = model_inputs(TOY, rng)
    first, second = rollout(Tensor(U), r, 2, store, TOY)
    U1, r1 = next_inputs(Tensor(U), r, first, TOY)
    np.testing.assert_array_equal(U1.data[:, :, TOY.pred_channels:], U[:, :, TOY.pred_channels:])
    assert (r1.hour_of_day, r1.day_of_year) == (12.0, 120.0)
    manual = forward_step(U1, r1, store, TOY)
    np.testing.assert_array_equal(manual.global_pred.data, second.global_pred.data)
    np.testing.assert_array_equal(manual.regional[5].data, second.regional[5].data)


def test_rollout_needs_a_step(rng):
    U, r = model_inputs(TOY, rng)
    with pytest.raises(ContractError):
        rollout(Tensor(U), r, 0, build_model(TOY, 0), TOY)


def test_clock_wraps():
    assert advance_clock(18.0, 365.0, 6.0) == (0.0, 1.0)
    assert advance_clock(0.0, 1.0, 48.0) == (0.0, 3.0)


def test_frozen_global_gets_no_gradient(rng):
    store = randomized(build_model(TOY, 0), seed=1, scale=0.05)
    U, r = model_inputs(TOY, rng)
    pv = ParamView(store, is_regional_param)
    bundle = forward_step(Tensor(U), r, pv, TOY)
    targets = [rng.normal(size=f.shape) for f in bundle.regional]
    grads = pv.gradients(T.backward(regional_step_loss(bundle, targets)))
    assert grads and not any(k.startswith("global.") for k in grads)
    assert any(k.startswith("mixer") for k in grads) and any(k.startswith("regional.") for k in grads)


# ------------------------------------------------------------------- losses


def test_global_loss_examples(rng):
    cfg = DESK
    truth = rng.normal(size=(4, 5, cfg.pred_channels))
    assert global_weighted_mae(Tensor(truth), truth, cfg).item() == 0.0
    assert global_weighted_mae(Tensor(truth + 1.0), truth, cfg).item() == pytest.approx(1.0, abs=1e-15)


def test_global_loss_matches_written_out_formula(rng):
    cfg = dataclasses.replace(DESK, n_upper_vars=2, n_levels=3, n_surface=2,
                              upper_weights=(1.0, 0.5, 2.0, 1.5, 0.3, 0.7), surface_weights=(0.2, 3.0))
    pred, truth = rng.normal(size=(2, 3, 4, 8))
    loss = global_weighted_mae(Tensor(pred), truth, cfg).item()
    assert loss == pytest.approx(naive_global_loss(pred, truth, cfg), abs=1e-14)


def test_global_loss_linear_in_weights(rng):
    base = DESK
    pred, truth = rng.normal(size=(4, 4, 6)), rng.normal(size=(4, 4, 6))
    doubled = dataclasses.replace(base, surface_weights=(2.0, 1.0, 1.0, 1.0))
    extra = np.abs(pred - truth)[:, :, 2].mean() / (base.n_surface + base.n_upper_vars)
    a = global_weighted_mae(Tensor(pred), truth, base).item()
    b = global_weighted_mae(Tensor(pred), truth, doubled).item()
    assert b - a == pytest.approx(extra, abs=1e-14)


def test_channel_weights_sum_to_one_for_unit_weights():
    assert channel_loss_weights(DESK).sum() == pytest.approx(1.0, abs=1e-15)
    assert channel_loss_weights(FULL_SCALE).sum() == pytest.approx(1.0, abs=1e-15)


def test_global_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        global_weighted_mae(Tensor(np.zeros((2, 2, 6))), np.zeros((2, 2, 5)), DESK)


def test_regional_mae_examples(rng):
    a = rng.normal(size=(5, 6, 7))
    assert regional_mae(Tensor(a), a).item() == 0.0
    b = a.copy()
    b[:, :, 3] += 0.7
    assert regional_mae(Tensor(b), a).item() == pytest.approx(0.1, abs=1e-15)
    c = rng.normal(size=a.shape)
    assert regional_mae(Tensor(a), c).item() == regional_mae(Tensor(c), a).item()
    with pytest.raises(DimensionError):
        regional_mae(Tensor(a), a[:, :, :6])


def test_losses_permutation_invariant_over_cells(rng):
    pred, truth = rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 5, 6))
    perm = rng.permutation(20)

    def shuffle(x):
        return x.reshape(20, -1)[perm].reshape(x.shape)

    assert global_weighted_mae(Tensor(shuffle(pred)), shuffle(truth), DESK).item() == pytest.approx(
        global_weighted_mae(Tensor(pred), truth, DESK).item(), abs=1e-15)
    assert regional_mae(Tensor(shuffle(pred)), shuffle(truth)).item() == pytest.approx(
        regional_mae(Tensor(pred), truth).item(), abs=1e-15)
