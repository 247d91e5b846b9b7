import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybridecg.data.synthetic import make_synthetic

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """100-record, 3-class synthetic corpus in the PTB-XL layout."""
    root = tmp_path_factory.mktemp("small_corpus")
    make_synthetic(str(root), n_records=100, n_classes=3, seed=3)
    return str(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
