import numpy as np
import pytest

from wilson.refmodel import ModelSpec, forward, init_model

SMALL = ModelSpec(d_model=8, n_heads=2, n_layers=3, vocab=64, max_T=8, d_ff=16)


@pytest.fixture(scope="session")
def toy():
    return init_model(ModelSpec(), seed=0)


@pytest.fixture(scope="session")
def small():
    return init_model(SMALL, seed=3)


@pytest.fixture(scope="session")
def small_trace(small):
    tokens = np.random.default_rng(5).integers(0, 64, size=6)
    return forward(small, tokens)


@pytest.fixture(scope="session")
def toy_trace(toy):
    tokens = np.random.default_rng(7).integers(0, 64, size=16)
    return forward(toy, tokens)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
