import json
import logging
from pathlib import Path
import shutil

from platformdirs import user_config_dir

from motionssm.model.config import LearnerConfig

logger = logging.getLogger(__name__)

USER_CONFIG_DIR = Path(user_config_dir('motionssm', 'motionssm'))
LEARNER_CONFIG_PATH = USER_CONFIG_DIR / 'learner_config.json'


def save_learner_config(config: LearnerConfig):
    # Save to a temporary file and then move that temporary file.
    # This ensures the previous file is only replaced by a complete one.
    try:
        tmp_path = LEARNER_CONFIG_PATH.with_name(
            f'temporary_{LEARNER_CONFIG_PATH.name}'
        )
        tmp_path.parent.mkdir(parents=True, exist_ok=True)
        serialized = config.serialize()
        with open(tmp_path, 'w') as wf:
            json.dump(serialized, wf, indent=2)

        shutil.move(tmp_path, LEARNER_CONFIG_PATH)
    except Exception:
        logger.exception('Failed to save learner config')


def load_learner_config() -> LearnerConfig:
    if not LEARNER_CONFIG_PATH.exists():
        # Doesn't exist. Just use the defaults.
        return LearnerConfig()

    try:
        with open(LEARNER_CONFIG_PATH, 'r') as rf:
            serialized = json.load(rf)

        return LearnerConfig.from_serialized(serialized)
    except Exception:
        logger.exception(
            f'Failed to load learner config at path: {LEARNER_CONFIG_PATH}'
        )
        return LearnerConfig()
