import numpy as np
import pytest

from dsense.data import ObservationTable
from dsense.simulation import DgpConfig, sample_dgp


def make_table(y, z, x, **kw):
    return ObservationTable(outcome=y, treatment=z, covariates=x, **kw)


@pytest.fixture
def small_study():
    # base favorable DGP, small enough for bootstrap tests
    return sample_dgp(DgpConfig(n=600, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    # one pass/fail line per acceptance criterion, shown even when output is captured
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[key])
