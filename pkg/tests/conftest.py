import numpy as np
import pytest

from dfpir.model import DFPIR, ModelConfig
from dfpir.nn import Init
from dfpir.rng import Rng

TINY_TASKS = ("noise25", "derain", "dehaze")


@pytest.fixture
def rng():
    return Rng(1234, "tests")


@pytest.fixture
def init64():
    return Init(7, "test-init", dtype=np.float64)


@pytest.fixture
def init32():
    return Init(7, "test-init", dtype=np.float32)


@pytest.fixture
def tiny_config():
    return ModelConfig(channels=4, blocks=(1, 1, 1, 1), prompt_dim=8, tasks=TINY_TASKS, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return DFPIR(tiny_config)


@pytest.fixture
def tiny_run_config(tmp_path):
    """JSON run config small enough for end-to-end CLI tests."""
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "model": {"channels": 4, "blocks": [1, 1, 1, 1], "prompt_dim": 8},
        "data": {"patch": 16, "samples_per_epoch": 8},
        "train": {"epochs": 1, "finetune_epochs": 1, "batch_size": 2, "eval_every": 4,
                  "eval_per_task": 2, "checkpoint_every": 2},
    }))
    return path
