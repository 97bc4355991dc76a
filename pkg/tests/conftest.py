import numpy as np
import pytest

from levnet.graph import ModelGraph, load_model
from levnet.levels import plan_modulus_chain
from levnet.transforms import apply_pipeline

from helpers import ACCEPTANCE_LINES, FIXTURES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance gates")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rn20_fixture() -> ModelGraph:
    """Committed rn20 model with 8x8 inputs, untransformed."""
    return load_model(str(FIXTURES / "rn20_8x8.json"))


@pytest.fixture(scope="session")
def rn20_p2fr(rn20_fixture):
    transformed, report = apply_pipeline(rn20_fixture, "P2FR")
    return transformed


@pytest.fixture(scope="session")
def rn20_plan(rn20_p2fr):
    return plan_modulus_chain(rn20_p2fr, delta_log2=40, ell=2)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
