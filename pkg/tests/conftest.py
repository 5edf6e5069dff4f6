import numpy as np
import pytest

from bilevel_smooth.corpus import NAMES, corpus_get

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=NAMES)
def corpus_problem(request):
    return corpus_get(request.param)


@pytest.fixture
def qp_kink():
    return corpus_get("qp_kink")


@pytest.fixture(scope="session")
def oracle():
    """Grid-oracle solutions at resolution 1e-3, computed once per session."""
    from functools import lru_cache
    from bilevel_smooth.metrics import grid_oracle

    @lru_cache(maxsize=None)
    def get(name):
        return grid_oracle(corpus_get(name), 1e-3)

    return get
