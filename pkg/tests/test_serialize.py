import json

import pytest

from motionssm.model import state
from motionssm.model.config import LearnerConfig
from motionssm.model.lgssm import LgssmParams
from motionssm.model.serializable import ValidationError


def test_deserialize(test_learner_config_serialized):
    serialized = test_learner_config_serialized
    config = LearnerConfig.from_serialized(serialized)

    # Now just check a few things to be sure it happened correctly
    for key, value in serialized.items():
        assert getattr(config, key) == value

    assert config != LearnerConfig()


def test_serialize(test_learner_config_serialized):
    ref_serialized = test_learner_config_serialized
    config = LearnerConfig.from_serialized(ref_serialized)

    # Verify that the round trip produces the same result
    serialized = config.serialize()
    assert ref_serialized == serialized


def test_deserialize_rejects_bad_values(test_learner_config_serialized):
    with pytest.raises(ValidationError):
        LearnerConfig.from_serialized({'momentum': 0.9})

    bad = {**test_learner_config_serialized, 'learning_rate': 0.0}
    with pytest.raises(ValidationError):
        LearnerConfig.from_serialized(bad)

    bad = {**test_learner_config_serialized, 'horizon': 2.5}
    with pytest.raises(ValidationError):
        LearnerConfig.from_serialized(bad)

    bad = {**test_learner_config_serialized, 'adapt_transition_only': 1}
    with pytest.raises(ValidationError):
        LearnerConfig.from_serialized(bad)


def test_set_parameters_is_all_or_nothing():
    config = LearnerConfig()
    with pytest.raises(ValidationError):
        config.set_parameters({'seed': 3, 'beta1': 1.0})

    assert config == LearnerConfig()

    config.set_parameters({'seed': 3})
    assert config.seed == 3
    assert config.replace(seed=4).seed == 4
    assert config.seed == 3


def test_params_serialize(small_params):
    serialized = small_params.serialize()
    json.dumps(serialized)
    assert LgssmParams.from_serialized(serialized) == small_params

    with pytest.raises(ValidationError):
        LgssmParams.from_serialized({**serialized, 'B': [[1.0]]})

    del serialized['mu0']
    with pytest.raises(ValidationError):
        LgssmParams.from_serialized(serialized)


def test_save_and_load_learner_config(learner_config_path):
    assert state.load_learner_config() == LearnerConfig()

    config = LearnerConfig(learning_rate=1e-3, horizon=30)
    state.save_learner_config(config)
    assert learner_config_path.exists()
    assert state.load_learner_config() == config


def test_load_corrupt_learner_config(learner_config_path):
    learner_config_path.parent.mkdir(parents=True)
    learner_config_path.write_text('{"learning_rate": -1}')
    assert state.load_learner_config() == LearnerConfig()
