import numpy as np
import pytest

from rshscp.classifier import SiteClassifier
from rshscp.model import FactorModel
from rshscp.simulation import SimSpec, generate


def random_instance(seed, p=12, widths=(4, 2), sites=(3, 3), twin=True, site_terms=True):
    """Small dataset plus a random (infeasible is fine) model around it."""
    data, _ = generate(SimSpec(p=p, widths=widths, subjects_per_site=sites, seed=seed))
    rng = np.random.default_rng(1000 + seed)
    dims = (p,) + tuple(widths)
    W = [rng.normal(scale=0.5, size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    lam = [rng.uniform(0.2, 1.5, (data.n_subjects, k)) for k in widths]
    U = V = Wt = None
    if site_terms:
        U = [rng.normal(1.0, 0.1, (data.n_sites, p)) for _ in widths]
        V = [rng.normal(scale=0.1, size=(p, p)) for _ in widths]
    if twin:
        Wt = [w + 0.05 * rng.normal(size=w.shape) for w in W]
    return data, FactorModel(W, lam, U, V, Wt)


def central_difference(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Normwise relative error ``max|a - n| / max|n|``."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def small_classifier():
    return SiteClassifier(6, 2, hidden=(5,), dropout=0.0, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:  # pragma: no cover
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
