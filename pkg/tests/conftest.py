import numpy as np
import pytest

from reluextract.network import Network

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def random_network(rng, d, k, R=2.0, B=2.0, signs=True):
    W = rng.standard_normal((k, d))
    W *= (rng.uniform(0.5, 1.0, k) * R / np.linalg.norm(W, axis=1))[:, None]
    b = rng.uniform(-B, B, k)
    s = rng.choice([-1.0, 1.0], k) if signs else np.ones(k)
    return Network(W, b, s)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
