import numpy as np
import pytest
from hypothesis import settings

from bondlab.operator_lab import GammaOperator, GMetric

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def gamma_with_spectrum(values, n_nodes=41, spacing=0.025, seed=0):
    """Gamma whose G-weighted singular values are exactly ``values``.

    Built as ``F^{-1} U diag(values) V^T`` with random orthonormal ``U``, ``V``.
    """
    rng = np.random.default_rng(seed)
    N = len(values)
    U, _ = np.linalg.qr(rng.standard_normal((n_nodes, N)))
    V, _ = np.linalg.qr(rng.standard_normal((N, N)))
    metric = GMetric(spacing, n_nodes)
    matrix = metric.solve_factor(U @ np.diag(values) @ V.T)
    return GammaOperator.from_matrix(matrix, spacing)


@pytest.fixture
def halving_gamma():
    """Spectrum 2, 1, 1/2, ... (eight values)."""
    return gamma_with_spectrum(2.0 ** (1 - np.arange(8)))


# --- acceptance summary --------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``record(criterion, passed, detail)``; lines are printed after the run."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion: int, passed: bool, detail: str = ""):
        prev = store.get(criterion)
        ok = bool(passed) and (prev is None or prev[0])
        details = [d for d in ((prev[1] if prev else ""), detail) if d]
        store[criterion] = (ok, "; ".join(details))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
