import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bslq.problem import ProblemSpec, example_spec, random_spec

settings.register_profile(
    "default",
    deadline=None,
    max_examples=30,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def example():
    return example_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def zero_spec(horizon=2, n=2, m=1) -> ProblemSpec:
    """All data zero except the weights needed for the assumptions."""
    return ProblemSpec(
        horizon, n, m,
        A=np.eye(n), B=np.ones((n, m)), C=0.5 * np.eye(n),
        Q=np.eye(n), S=np.zeros((m, n)), R=np.eye(m), G0=np.eye(n),
        q=np.zeros(n), eta=np.zeros(n), rho=np.zeros(m), xi=np.zeros(n),
    )


def seeded_specs(count, seed=7, max_n=4, max_m=3, max_horizon=5):
    """Deterministic list of random valid specs with mixed shapes."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        N = int(rng.integers(1, max_horizon + 1))
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(1, max_m + 1))
        out.append(random_spec(rng, N, n, m, adapted=bool(rng.integers(2)),
                               time_varying=bool(rng.integers(2))))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
