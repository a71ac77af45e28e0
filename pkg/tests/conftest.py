import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fastslow import pairs as sp
from fastslow.reference import mostly_expanding_reference, sys_a, sys_b


@pytest.fixture(scope="session")
def A():
    return sys_a(0.01)


@pytest.fixture(scope="session")
def B():
    return sys_b(0.01)


@pytest.fixture(scope="session")
def B_small():
    return sys_b(1e-3)


@pytest.fixture(scope="session")
def REF():
    return mostly_expanding_reference(0.01)


@pytest.fixture(scope="session")
def ledger_B(B):
    return sp.derive_standard_constants(B, T0=0.5)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
