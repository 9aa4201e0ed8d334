"""Shared fixtures: small deterministic datasets and quickly trained models."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from cormpo.guardian import GuardianConfig, guardian_fit
from cormpo.synthenv import (
    GeneratorConfig,
    NoiseConfig,
    generate_dataset,
    inject_noise,
    noisy_expert_policy,
)
from cormpo.twin import TwinParams, TwinTrainConfig, twin_train

torch.set_num_threads(1)


def make_window(map_=80.0, hr=75.0, pulsat=30.0, **overrides) -> np.ndarray:
    """Constant-in-time window with safe defaults for every feature."""
    row = np.array([map_, 20000.0, 300.0, 2.0, 80.0, 15.0, hr, map_ + pulsat / 2,
                    map_ - pulsat / 2, pulsat, 35.0, 2.0])
    window = np.tile(row, (6, 1))
    for key, value in overrides.items():
        idx = {"lvp": 4, "lvedp": 5, "tau_lv": 10, "ese_lv": 11}[key]
        window[:, idx] = value
    return window


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GeneratorConfig(n_trajectories=260, horizon=6, seed=7)
    return generate_dataset(cfg, noisy_expert_policy(0.25))


@pytest.fixture(scope="session")
def small_noisy_dataset(small_dataset):
    return inject_noise(small_dataset, NoiseConfig(sigma=0.2, fraction=0.8, seed=11))


@pytest.fixture(scope="session")
def tiny_twin(small_dataset):
    params = TwinParams(model_dim=32, n_heads=2, ff_dim=48, decoder_hidden=48)
    cfg = TwinTrainConfig(max_epochs=6, patience=3, seed=1)
    return twin_train(small_dataset, params, cfg)


@pytest.fixture(scope="session")
def small_guardian(small_dataset):
    return guardian_fit(
        small_dataset, GuardianConfig(percentile=20.0, k=60, lam=0.1, split_seed=3)
    )
