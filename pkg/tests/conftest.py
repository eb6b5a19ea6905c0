from pathlib import Path

import numpy as np
import pytest

from levydual.market_model import FiniteAtoms, LevyMarketSpec, simulate_paths
from levydual.utility import PowerLoss, make_shortfall_utility

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def driftless_spec():
    return LevyMarketSpec(b=0.0, sigma=0.2)


@pytest.fixture(scope="session")
def jump_spec():
    return LevyMarketSpec(b=0.05, sigma=0.2, jumps=FiniteAtoms((-0.3, 0.4), (0.3, 0.3)))


@pytest.fixture(scope="session")
def quad_unit():
    return make_shortfall_utility(PowerLoss(2.0), 1.0)


@pytest.fixture(scope="session")
def jump_ensemble(jump_spec):
    return simulate_paths(jump_spec, 20, 4000, 17)


@pytest.fixture(scope="session")
def driftless_ensemble(driftless_spec):
    return simulate_paths(driftless_spec, 20, 4000, 5)


def mean_se(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))
