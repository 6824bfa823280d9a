"""Shared fixtures.  Trained models and crafted perturbations are built once per session."""

import numpy as np
import pytest

from tsdf.fusion import TsdfConfig, craft_tsdf
from tsdf.harness import PersistenceConfig, run_persistence_experiment, stack_images, synth_dataset
from tsdf.interruption import InterruptionConfig, craft_interruption
from tsdf.zoo import TrainConfig, train_toy_models

SEED = 7
CRAFT = slice(0, 128)
EVAL = slice(-64, None)

# filled by the acceptance tests, printed at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def dataset():
    return synth_dataset(512, SEED)


@pytest.fixture(scope="session")
def images(dataset):
    return stack_images(dataset)


@pytest.fixture(scope="session")
def eval_boxes(dataset):
    return [s.face_box for s in dataset[EVAL]]


@pytest.fixture(scope="session")
def models(dataset):
    return train_toy_models(dataset, TrainConfig(), SEED)


@pytest.fixture(scope="session")
def interruption_run(images, models):
    """``(W0, per-iteration iterates)`` for the default configuration."""
    extractors, _, _ = models
    steps = []
    W = craft_interruption(images[CRAFT], extractors, InterruptionConfig(), callback=lambda t, W, l: steps.append(W.data.copy()))
    return W.data, steps


@pytest.fixture(scope="session")
def W0(interruption_run):
    return interruption_run[0]


@pytest.fixture(scope="session")
def tsdf_run(images, models, W0):
    extractors, _, detectors = models
    deltas, objective = [], []

    def on_poison(t, d, j):
        deltas.append(d.copy())
        objective.append(j)

    p = craft_tsdf(images[CRAFT], extractors, detectors, TsdfConfig(), W0=W0, on_poison=on_poison)
    return p, deltas, objective


@pytest.fixture(scope="session")
def persistence(dataset, models, tsdf_run):
    p, _, _ = tsdf_run
    return run_persistence_experiment(PersistenceConfig(), SEED, models=models, dataset=dataset, perturbation=p)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def criterion():
    """``record(key, ok, detail)`` stores one acceptance line and returns ``ok``."""

    def record(key, ok, detail=""):
        ACCEPTANCE[key] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
