import sys
import warnings

import numpy as np
import pytest

from pciset.gpssm import Dataset, fit_gpssm, uncertainty_bounds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model():
    """GPSSM fitted to a short noisy trajectory of a stable 2-state system."""
    gen = np.random.default_rng(7)
    A0 = np.array([[0.9, 0.1], [0.0, 0.8]])
    B0 = np.array([[0.0], [0.1]])
    N = 40
    X = gen.uniform(-1, 1, (N, 2))
    U = gen.uniform(-1, 1, (N, 1))
    Xp = X @ A0.T + U @ B0.T + 0.02 * np.sin(2 * X) + 1e-3 * gen.standard_normal((N, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_gpssm(Dataset(X, U, Xp), restarts=2, seed=3)
    return model, uncertainty_bounds(model)



def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
