import numpy as np
import pytest

from postureid import dataset, dec, plant, stimulus


@pytest.fixture(scope="session")
def model():
    return plant.build_plant()


@pytest.fixture(scope="session")
def defaults():
    return dec.Defaults.table()


@pytest.fixture(scope="session")
def profile_sim():
    return stimulus.canonical_profile(sample_rate=dataset.SIM_SAMPLE_RATE)


@pytest.fixture(scope="session")
def profile_50():
    return stimulus.canonical_profile()


@pytest.fixture(scope="session")
def default_trace(model, defaults, profile_sim):
    """One accepted trial with the default parameter table."""
    trace = dataset.run_trial(model, list(defaults.modules), profile_sim,
                              defaults)
    assert isinstance(trace, dataset.SimTrace)
    return trace


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small but real dataset shared by dataset/feature/eval tests."""
    from postureid.features import featurize_dataset

    ds = dataset.build_dataset(36, seed=1234, split_fractions=(0.6, 0.2, 0.2))
    featurize_dataset(ds)
    return ds
