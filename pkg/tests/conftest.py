import logging

import numpy as np
import pytest

from engine.kernels import BinomialPeriodParams, BinomialStep, BsPeriodParams, LogNormalLaw, kernel_from_binomial
from engine.measures import Atom, RiskAversionMeasure, cmim, crra, log_utility as log_measure
from utils import Logger


@pytest.fixture(scope="session", autouse=True)
def engine_log(tmp_path_factory):
    Logger.init(tmp_path_factory.mktemp("logs"), file_level=logging.DEBUG, console_level=logging.ERROR)
    yield
    Logger.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def one_step():
    """N=1 period with (u, d, p) = (1.2, 0.9, 0.6), so q = 1/3."""
    return BinomialPeriodParams(steps=[BinomialStep(u=1.2, d=0.9, p=0.6)])


@pytest.fixture
def four_steps():
    return BinomialPeriodParams(
        steps=[
            BinomialStep(u=1.2, d=0.9, p=0.6),
            BinomialStep(u=1.1, d=0.95, p=0.5),
            BinomialStep(u=1.3, d=0.8, p=0.45),
            BinomialStep(u=1.05, d=0.97, p=0.55),
        ]
    )


@pytest.fixture
def binomial_law(one_step):
    return kernel_from_binomial(one_step)


@pytest.fixture
def lognormal_law():
    return LogNormalLaw(sigma2=0.09)


@pytest.fixture
def bs_blocks():
    """Three Black-Scholes periods with sigma^2 = 0.09, 0.04, 0.05."""
    return [BsPeriodParams(lam=[0.3]), BsPeriodParams(lam=[0.2]), BsPeriodParams(lam=[0.1, 0.2])]


@pytest.fixture
def mixture():
    """{0.5 at gamma=1.5, 0.5 at gamma=3} with ambient bounds (1.4, 3.1)."""
    return RiskAversionMeasure(
        atoms=[Atom(gamma=1.5, weight=0.5), Atom(gamma=3.0, weight=0.5)], gamma_min=1.4, gamma_max=3.1
    )


@pytest.fixture
def log_utility():
    return cmim(log_measure())


@pytest.fixture
def crra_two():
    """I(y) = y^(-1/2)."""
    return cmim(crra(2.0, 1.0, 3.0))
