import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def plane_grid(n=20, spacing=0.1, z=0.0):
    u = np.arange(n) * spacing
    X, Y = np.meshgrid(u, u)
    return np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])


def structured_scene(rng, n=4000):
    """Three orthogonal noisy planes: fully constrains a rigid alignment."""
    k = n // 3
    a = np.column_stack([rng.uniform(0, 6, k), rng.uniform(0, 6, k), rng.normal(0, 0.01, k)])
    b = np.column_stack([rng.uniform(0, 6, k), rng.normal(0, 0.01, k), rng.uniform(0, 4, k)])
    c = np.column_stack([rng.normal(0, 0.01, k), rng.uniform(0, 6, k), rng.uniform(0, 4, k)])
    return np.concatenate([a, b, c])


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
