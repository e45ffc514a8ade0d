"""
Shared fixtures: toy schedules, oracle predictors and small run configs.

Slow trend runs only execute with LRDM_SLOW=1.
"""

import json
import os
from types import SimpleNamespace

import numpy as np
import pytest

from lrdm import LRDMState, RunConfig, build_linear
from lrdm.lrdm_process import DiffusionProcess


SLOW = os.environ.get("LRDM_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long desk-scale training runs (set LRDM_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="set LRDM_SLOW=1 to run desk-scale training checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


class OraclePredictor:
    """Predicts the exact target for a known x0 (image, noise or mean)."""

    repr_dim = 0
    num_classes = 0

    def __init__(self, schedule, x0, parameterization="image"):
        self.process = DiffusionProcess(schedule)
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.parameterization = parameterization

    def __call__(self, x_t, t, cond=None, class_id=None, train_mode=False, rng=None):
        x_t = np.asarray(x_t.values if hasattr(x_t, "values") else x_t, dtype=np.float64)
        x0 = np.broadcast_to(self.x0, x_t.shape)
        if self.parameterization == "image":
            return x0.copy()
        if self.parameterization == "noise":
            return self.process.x0_to_eps(x_t, x0, t)
        return self.process.x0_to_mu(x_t, x0, t)


class ZeroPredictor:
    """Always predicts zero."""

    repr_dim = 0
    num_classes = 0

    def __call__(self, x_t, t, cond=None, class_id=None, train_mode=False, rng=None):
        x_t = np.asarray(x_t.values if hasattr(x_t, "values") else x_t)
        return np.zeros(x_t.shape)


@pytest.fixture
def toy_schedule():
    """T=3 schedule with betas (0.1, 0.2, 0.3)."""
    return build_linear(3, 0.1, 0.3)


@pytest.fixture
def default_schedule():
    return build_linear(100)


@pytest.fixture
def oracles():
    return SimpleNamespace(oracle=OraclePredictor, zero=ZeroPredictor)


@pytest.fixture
def state(tmp_path):
    return LRDMState(output_dir=str(tmp_path / "out"))


def tiny_values(mode: str = "dm") -> dict:
    """Small, fast configuration for pipeline and CLI tests."""
    values = {
        "schedule": {"T": 10},
        "model": {"mode": mode, "parameterization": "noise" if mode == "dm" else "image",
                  "hidden": [16, 16], "encoder_hidden": [16, 16], "embed_dim": 8, "repr_dim": 2},
        "trainer": {"steps": 30, "batch_size": 16, "ema_decay": 0.9, "lam": 1e-3},
        "sampler": {"n": 40, "shard_size": 16},
        "data": {"n": 200, "n_heldout": 80},
        "analysis": {"t_grid_points": 4, "n_mc": 1, "n_eval": 12, "energy_max_points": 200,
                     "null_resamples": 3, "pca_grid_n": 2, "interp_points": 4, "recon_resamples": 2},
        "first_stage": {"steps": 20, "batch_size": 16, "scale_batches": 4, "hidden": [8]},
    }
    return values


@pytest.fixture(scope="session")
def config_file(tmp_path_factory):
    """Writes tiny_values(mode) as a JSON config file and returns its path."""
    root = tmp_path_factory.mktemp("configs")

    def make(mode: str = "dm") -> str:
        path = root / f"{mode}.json"
        path.write_text(json.dumps(tiny_values(mode), indent=2))
        return str(path)
    return make


@pytest.fixture
def tiny_config(state):
    def make(mode: str = "dm", **overrides) -> RunConfig:
        config = RunConfig(tiny_values(mode), state)
        for dotted, value in overrides.items():
            config.set(dotted.replace("__", "."), value)
        return config.validate()
    return make
