import numpy as np
import pytest

from manifold_inversion.autodiff import MLP
from manifold_inversion.models import Classifier, oracle_generator


def make_classifier(d=6, C=4, hidden=(8,), seed=0, activation="tanh", init_scale=1.0):
    net = MLP.create([d, *hidden, C], activation, np.random.default_rng(seed), init_scale)
    return Classifier(net, C)


def make_generator(k=3, grid=4, hidden=8, seed=0):
    return oracle_generator(k, grid, hidden, seed, input_scale=0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def classifier():
    return make_classifier()


@pytest.fixture
def generator():
    return make_generator()


# one line per acceptance criterion, printed at the end of the run
CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def report(name: str, ok: bool, detail: str = "") -> bool:
        CRITERIA.append((name, bool(ok), detail))
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
