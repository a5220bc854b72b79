import numpy as np
import pytest

from pqsse import fixed_point, validate_params


def random_triples(n, seed=12345):
    """Log-uniform m, gamma in [1e-3, 1e3]; gamma' in {0} U log-uniform [1e-3, 1e3]."""
    rng = np.random.default_rng(seed)
    m = 10.0 ** rng.uniform(-3, 3, n)
    g = 10.0 ** rng.uniform(-3, 3, n)
    gp = 10.0 ** rng.uniform(-3, 3, n)
    gp[rng.random(n) < 0.1] = 0.0
    return [validate_params(*t) for t in zip(m, g, gp)]


@pytest.fixture
def qmupl():
    """m = gamma = 1, gamma' = 0."""
    p = validate_params(1.0, 1.0, 0.0)
    return p, fixed_point(p)


@pytest.fixture
def default_params():
    p = validate_params(1.0, 1.0, 0.5)
    return p, fixed_point(p)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
