import numpy as np
import pytest

from dualsync.diffusion import make_schedule
from dualsync.model import ModelConfig


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture
def toy_config():
    return ModelConfig(n_frames=8, joints=2, expr_dim=3, audio_dim=4, d_model=16, heads=2, layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
