import json
from pathlib import Path

import numpy as np
import pytest

from motionssm.model.lgssm import LgssmParams
from motionssm.utils.rng import make_rng

TEST_DIR = Path(__file__).resolve().parent


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_params():
    # 2-d rotation with a scalar observation
    angle = 0.3
    A = 0.95 * np.array(
        [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    )
    return LgssmParams(
        A=A,
        Q=0.1 * np.eye(2),
        C=np.array([[1.0, 0.5]]),
        R=np.array([[0.2]]),
        mu0=np.array([1.0, -1.0]),
        Sigma0=np.eye(2),
    )


@pytest.fixture
def scalar_params():
    return LgssmParams(
        A=np.array([[1.0]]),
        Q=np.array([[1.0]]),
        C=np.array([[1.0]]),
        R=np.array([[1.0]]),
        mu0=np.array([0.0]),
        Sigma0=np.array([[1.0]]),
    )


@pytest.fixture
def learner_config_path(tmp_path, monkeypatch):
    # Keep persisted user defaults out of the tests
    path = tmp_path / 'config' / 'learner_config.json'
    monkeypatch.setattr('motionssm.model.state.LEARNER_CONFIG_PATH', path)
    return path


@pytest.fixture
def test_learner_config_serialized():
    path = TEST_DIR / 'test_learner_config.json'
    with open(path, 'r') as rf:
        return json.load(rf)
