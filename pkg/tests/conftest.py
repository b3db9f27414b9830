import numpy as np
import pytest

from fednano.data import TaskSpec, build_client_datasets
from fednano.federation import FederationConfig
from fednano.model import ModelDims, init_adapters, init_frozen

SMALL_TASK = TaskSpec(n_samples=400)


@pytest.fixture
def dims():
    return ModelDims()


@pytest.fixture
def frozen(dims):
    return init_frozen(0, dims)


@pytest.fixture
def trained_adapters(dims):
    """Adapters with nonzero up-projections, as after some training."""
    ad = init_adapters(4, dims.d_model, 0)
    rng = np.random.default_rng(1)
    return ad.with_flat(ad.flatten() + 0.3 * rng.standard_normal(ad.n_params))


@pytest.fixture(scope="session")
def small_datasets():
    return build_client_datasets(SMALL_TASK, 3, 0.5, 0)


@pytest.fixture
def small_config():
    return FederationConfig(n_clients=3, rounds=2, local_steps=4, batch_size=16, rank=4, strategy="fedavg")


# -- acceptance summary -------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
