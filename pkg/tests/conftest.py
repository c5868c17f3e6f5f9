import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from models_schemas import Task, TrainConfig  # noqa: E402
from services_data import materialize, synth_shapes  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    """Smallest architecture that still exercises every block type."""
    def make(task: Task = Task.CGAN, **overrides) -> TrainConfig:
        values = dict(
            task=task,
            epochs=2,
            image_size=16,
            generator_base_channels=2,
            generator_depth=2,
            discriminator_base_channels=2,
            discriminator_stride2_layers=1,
            checkpoint_every=1,
            seed=3,
        )
        values.update(overrides)
        return TrainConfig(**values)
    return make


@pytest.fixture
def synth_dir(tmp_path):
    """Twelve 16x16 synthetic samples on disk."""
    root = tmp_path / "data"
    materialize(synth_shapes(12, 16, seed=5), root)
    return root
