"""Shared fixtures: one small synthetic cohort and a trained database.

Session scope keeps the expensive pieces (waveform rendering, model
identification) to a single run; tests treat the fixtures as read-only.
"""

import numpy as np
import pytest

from nicpest import estimator, synth
from nicpest.estimator import TrainConfig
from nicpest.synth import GeneratorConfig


@pytest.fixture(scope="session")
def cohort():
    return synth.generate_cohort(1234, n_systems=5, entries_per_system=2,
                                 config=GeneratorConfig())


@pytest.fixture(scope="session")
def entries(cohort):
    return cohort.entries


@pytest.fixture(scope="session")
def db(entries):
    cfg = TrainConfig(gamma=10.0, rho=1.0, seed=5)
    return estimator.train_database(entries, cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
