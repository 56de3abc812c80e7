import ctypes
import gc

import jax
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import convexyield  # noqa: F401  (enables float64)
from convexyield import dataset as ds
from convexyield.models import init_model

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

Y0 = 525.0


def pytest_collection_modifyitems(items):
    # long training runs go last so the quick suites report first
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture(autouse=True, scope="module")
def _release_compiled():
    yield
    jax.clear_caches()
    gc.collect()
    try:  # hand freed compiler memory back to the OS between modules
        ctypes.CDLL("libc.so.6").malloc_trim(0)
    except (OSError, AttributeError):
        pass


@pytest.fixture(scope="session")
def specimens():
    return ds.load_specimens()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def anisotropic_hill():
    m = init_model("hill48")
    return m.with_params({"hill": np.array([0.3, 0.6, 0.4, 1.2, 1.5, 1.8])})


def anisotropic_yld():
    m = init_model("yld2004")
    r = np.random.default_rng(7)
    return m.with_params({"c1": 1 + 0.3 * r.uniform(-1, 1, 9), "c2": 1 + 0.3 * r.uniform(-1, 1, 9), "a": 6.0})


@pytest.fixture(scope="session")
def all_models():
    """One instance per kind; neural ones randomly initialized."""
    models = {"hill48": anisotropic_hill(), "yld2004": anisotropic_yld()}
    for kind in ("icnn", "hybrid", "pi-icnn1", "pi-icnn2", "pi-icnn2-v1", "pi-icnn2-v2"):
        models[kind] = init_model(kind, seed=3, hill=[0.3, 0.6, 0.4, 1.2, 1.5, 1.8])
    return models


def random_stresses(rng, n, scale=Y0):
    return scale * rng.normal(size=(n, 6))
