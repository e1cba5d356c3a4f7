"""Session fixtures: trained toy models and their evaluation corpora.

Training a 12-layer model takes about 40 s, so the trained checkpoints are
built once per session and shared.  Wall-clock build times are recorded so
time-budgeted checks can charge fixture construction to their own budget.
"""

import time
from dataclasses import replace

import pytest

from layerslim import (
    CalibrationCorpus,
    MajorityTask,
    ModelConfig,
    init_model,
    train_toy,
)

CANONICAL_CONFIG = ModelConfig(
    vocab_size=32, dim=64, n_layers=12, n_heads=4,
    mlp_hidden=128, max_seq=16, seed=1234,
)
TASK = MajorityTask()
TRAIN_RECIPE = {"steps": 400, "lr": 2e-3, "batch_size": 32, "n_train": 4096}

# (model seed, training seed) for the three-seed ablation grid
SEED_GRID = ((1234, 0), (1235, 1), (1236, 2))

_BUILD_SECONDS: dict[tuple[int, int], float] = {}


def _train(model_seed: int, train_seed: int):
    cfg = replace(CANONICAL_CONFIG, seed=model_seed)
    start = time.perf_counter()
    model = train_toy(init_model(cfg), TASK, seed=train_seed, **TRAIN_RECIPE)
    _BUILD_SECONDS[(model_seed, train_seed)] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def canonical_model():
    """12-layer model trained with the default recipe (seeds 1234/0)."""
    return _train(*SEED_GRID[0])


@pytest.fixture(scope="session")
def seed_models(canonical_model):
    """Three independently initialized and trained checkpoints."""
    return (canonical_model,) + tuple(_train(*pair) for pair in SEED_GRID[1:])


@pytest.fixture(scope="session")
def build_seconds():
    """Training wall time per (model seed, train seed), filled lazily."""
    return _BUILD_SECONDS


@pytest.fixture(scope="session")
def calib_corpus():
    """256-sample calibration corpus, the pipeline default."""
    return CalibrationCorpus(
        tuple(TASK.generate(256, seed=4242)), seed=4242, source="majority-task"
    )


@pytest.fixture(scope="session")
def eval_streams():
    """512 labeled evaluation samples, disjoint seed from calibration."""
    return TASK.generate(512, seed=9999)
