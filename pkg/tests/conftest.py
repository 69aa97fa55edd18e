import sys
import warnings

import numpy as np
import pytest

from sparsevos.config import PipelineConfig
from sparsevos.corpus import make_corpus
from sparsevos.weights import init_weights


@pytest.fixture(scope="session")
def cfg() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture(scope="session")
def weights(cfg):
    return init_weights(cfg.model, seed=0)


@pytest.fixture(scope="session")
def scenes():
    return make_corpus(3, seed=7, n_frames=12)


@pytest.fixture(scope="session")
def scene(scenes):
    return scenes[0]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _strict_numerics():
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
