import numpy as np
import pytest
from hypothesis import settings

from homodyne_qed.hilbert import SystemParams

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


def random_density(dim: int, rank: int, rng: np.random.Generator, levels: int | None = None,
                   n_fock: int | None = None) -> np.ndarray:
    """Random mixed state; with ``levels`` only the lowest Fock levels are populated."""
    X = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    if levels is not None:
        X = X.reshape(2, n_fock, rank)
        X[:, levels:] = 0
        X = X.reshape(dim, rank)
    rho = X @ X.conj().T
    return rho / np.trace(rho).real


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small():
    return SystemParams(g=1.0, E=0.5, beta=0.3 + 0.4j, n_fock=30)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    order = ["P1", "P2", "P3", "P4", "P5", "P6a", "P6b", "P7", "P8", "P9", "P10", "P11"]
    for cid in order:
        if cid in results:
            terminalreporter.write_line(results[cid])
