import dataclasses

import numpy as np
import pytest

from scalemixer.config import DataConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig

# Small enough that a forward step takes milliseconds, but with every structural
# feature of the desk preset: 2 coupling blocks, a 2 x 2 regional token grid
# strictly inside a 4 x 6 global token grid, and m < N.
TOY = ModelConfig(
    global_h=8, global_w=12, patch=2,
    region_h=20, region_w=20, region_row0=10, region_col0=20, regional_patch=10,
    d=8, heads=2, M=4, k=2, m=4,
    global_head_hidden=4, regional_head_hidden=4,
)

TOY_RUN = RunConfig(
    model=TOY,
    data=DataConfig(n_timesteps=480, n_stations=5),
    train=TrainConfig(steps=20, pretrain_steps=20, rollout_steps=3, rollout_horizon=2,
                      eval_every=10, max_val_samples=4, warmup=5),
    eval=EvalConfig(ablation_ks=(1, 2, 4)),
)

TOY_INI = """\
[model]
global_h = 8
global_w = 12
patch = 2
regional_patch = 10
region_h = 20
region_w = 20
region_row0 = 10
region_col0 = 20
d = 8
heads = 2
M = 4
k = 2
m = 4
global_head_hidden = 4
regional_head_hidden = 4

[data]
n_timesteps = 480
n_stations = 5

[train]
steps = 20
pretrain_steps = 20
rollout_steps = 3
rollout_horizon = 2
eval_every = 10
max_val_samples = 4
warmup = 5

[eval]
ablation_ks = 1, 2, 4
"""


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def toy_run():
    return TOY_RUN


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomized(store, seed=0, scale=0.3):
    """Perturb every parameter so no residual branch is trivially zero."""
    r = np.random.default_rng(seed)
    return {k: v + scale * r.normal(size=v.shape) for k, v in sorted(store.items())}


def with_model(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


@pytest.fixture(scope="session")
def toy_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.ini"
    path.write_text(TOY_INI)
    return path


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
