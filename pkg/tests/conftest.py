import numpy as np
import pytest

from ynet.data import load_dataset, synth_generate


@pytest.fixture(scope="session")
def dpsd_dir(tmp_path_factory):
    """Small deterministic DPSD dataset shared across test modules."""
    root = tmp_path_factory.mktemp("dpsd") / "data"
    synth_generate("dpsd", 16, 64, seed=101, out_dir=root)
    return root


@pytest.fixture(scope="session")
def dpsd_samples(dpsd_dir):
    return load_dataset(dpsd_dir)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
