import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mkgc.data import SyntheticSpec, generate_synthetic, load_dataset

settings.register_profile(
    "mkgc", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("mkgc")

# property tests that are cheap enough run this many cases
MANY = 1000


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small two-language synthetic dataset on disk."""
    root = tmp_path_factory.mktemp("small") / "data"
    spec = SyntheticSpec(n_entities=60, n_relations=6, n_triples=400, seed=3, n_clusters=6)
    generate_synthetic(spec, root)
    return root


@pytest.fixture(scope="session")
def small_kg(small_dataset):
    return load_dataset(small_dataset)


def random_complex(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)
