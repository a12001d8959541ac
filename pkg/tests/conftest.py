import numpy as np
import pytest

from oct_layertrace.data import PhantomSpec, generate_phantom
from oct_layertrace.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_config(n_boundaries=3, height=32, width=48, **kw):
    base = dict(loi_channels=4, edge_channels=3, lstm_sizes=(8, 4))
    base.update(kw)
    return ModelConfig.reduced(height, width, n_boundaries, **base)


def tiny_phantom_spec(n_boundaries=3, height=32, width=48, n_slices=2, **kw):
    base = dict(n_boundaries=n_boundaries, height=height, width=width, n_slices=n_slices, min_gap=1.0,
                shadow_count=0)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_volume():
    return generate_phantom(tiny_phantom_spec(), np.random.default_rng(7), "vol_000")


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """``report(n, ok, detail)`` records one pass/fail line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
