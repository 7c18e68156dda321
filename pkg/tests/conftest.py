import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wmk.covers import make_cover_set
from wmk.rng import Rng
from wmk.training import SyncTrainConfig, TrainConfig, train_joint, train_syncnet


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_covers(rng):
    return make_cover_set(rng.child("covers"), 4, 64, 64)


@pytest.fixture(scope="session")
def mini_state():
    """A small but genuinely trained model for unit/CLI round-trip tests.

    64x64 covers, no distortions: converges to exact clean decoding in a
    few hundred steps.
    """
    covers = make_cover_set(Rng(99), 8, 64, 64)
    cfg = TrainConfig(steps=250, batch=4, seed=5, image_size=(64, 64),
                      distortions_enabled=False, log_interval=50, checkpoint_every=250)
    state, _ = train_joint(covers, cfg)
    return state


@pytest.fixture(scope="session")
def mini_sync_state(mini_state):
    covers = make_cover_set(Rng(98), 8, 64, 64)
    cfg = SyncTrainConfig(steps=150, batch=4, seed=6, log_interval=50)
    state, _ = train_syncnet(covers, mini_state, cfg)
    return state
