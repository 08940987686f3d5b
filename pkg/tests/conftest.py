import os
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from cyclelight.config import TrainerConfig
from cyclelight.fixtures import generate_fixture_tree
from cyclelight.trainer import train

torch.set_num_threads(1)

settings.register_profile(
    "ci", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def random_image(rng: np.random.Generator, h: int = 16, w: int = 16) -> np.ndarray:
    return rng.random((h, w, 3)).astype(np.float32)


# -- desk-scale artifacts shared by trainer/evalkit/acceptance tests ----------

DESK_SEED = 7


def desk_config(**overrides) -> TrainerConfig:
    base = dict(iterations=500, learning_rate=1e-3, seed=DESK_SEED)
    base.update(overrides)
    return TrainerConfig(**base)


@pytest.fixture(scope="session")
def desk_fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_fixture")
    generate_fixture_tree(root, train_per_side=32, eval_count=48,
                          classifier_count=200, seed=DESK_SEED)
    return root


@pytest.fixture(scope="session")
def tiny_fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_fixture")
    generate_fixture_tree(root, train_per_side=4, eval_count=4,
                          classifier_count=8, seed=11)
    return root


@pytest.fixture(scope="session")
def desk_run(desk_fixture_dir, tmp_path_factory):
    """The reference desk training run (cycle attention, seed 7)."""
    out = tmp_path_factory.mktemp("desk_run")
    start = time.time()
    result = train(desk_config(), desk_fixture_dir, out)
    return {"result": result, "elapsed": time.time() - start, "data": desk_fixture_dir}


@pytest.fixture(scope="session")
def desk_run_repeat(desk_fixture_dir, tmp_path_factory):
    """Bitwise-determinism twin of desk_run."""
    out = tmp_path_factory.mktemp("desk_run_repeat")
    result = train(desk_config(), desk_fixture_dir, out)
    return {"result": result}


@pytest.fixture(scope="session")
def desk_run_ip_adapter(desk_fixture_dir, tmp_path_factory):
    """Ablation twin of desk_run with the decoupled image-prompt adapter."""
    out = tmp_path_factory.mktemp("desk_run_ip")
    result = train(desk_config(adapter_mode="ip_adapter"), desk_fixture_dir, out)
    return {"result": result}


@pytest.fixture(scope="session")
def desk_evaluator(desk_fixture_dir):
    from cyclelight.evalkit import train_toy_classifier
    from cyclelight.fixtures import CLASS_NAMES, load_classifier_split

    images, labels = load_classifier_split(desk_fixture_dir)
    return train_toy_classifier(images, labels, CLASS_NAMES, seed=0)
