"""Shared fixtures: tiny model specs and synthetic datasets sized for tests."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gptraj.core import COMMANDS, Command
from gptraj.synthdomain import DomainSpec, gen_dataset
from gptraj.trainer import ModelSpec, TrainConfig, build_model

TINY_OBS_DIM = 16


def tiny_domain(name: str = "tiny", noise: float = 0.03, mirror: bool = False,
                obs_transform=None, obs_bias=None, speed=(3.0, 12.0),
                curv_scale: float = 1.0) -> DomainSpec:
    dim = TINY_OBS_DIM
    return DomainSpec(
        name=name,
        obs_transform=np.eye(dim) if obs_transform is None else obs_transform,
        obs_bias=np.zeros(dim) if obs_bias is None else obs_bias,
        obs_noise_std=noise,
        curvature_prior={
            Command.TURN_LEFT: (0.05 * curv_scale, 0.015),
            Command.GO_STRAIGHT: (0.0, 0.004),
            Command.TURN_RIGHT: (-0.05 * curv_scale, 0.015),
        },
        speed_prior=speed,
        mirror=mirror,
    )


def tiny_spec() -> ModelSpec:
    return ModelSpec(obs_dim=TINY_OBS_DIM, token_dim=8, n_ego=12, n_agent=7,
                     group_size=4, encoder_hidden=24, planner_hidden=24,
                     classifier_hidden=32)


def tiny_config(seed: int = 0, **kw) -> TrainConfig:
    defaults = dict(epochs_stage1=4, epochs_stage2=3, epochs_stage3=3,
                    adapt_epochs=2, batch_size=16)
    defaults.update(kw)
    return TrainConfig(seed=seed, **defaults)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_dataset(tiny_domain(), 90, seed=5, obs_dim=TINY_OBS_DIM)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    return build_model(tiny_dataset, tiny_config(), tiny_spec())


def assert_commands_covered(records):
    seen = {r.command for r in records}
    assert seen == set(COMMANDS)
