"""Shared fixtures and reference generators for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from etcbf.qp import QuadraticProgram
from etcbf.systems import make_double_integrator


def random_qp(rng: np.random.Generator) -> QuadraticProgram:
    """Random small strictly-convex QP from the equivalence-sweep family."""
    n_v = int(rng.integers(1, 5))
    n_c = int(rng.integers(0, 9))
    m = rng.uniform(-1.0, 1.0, size=(n_v, n_v))
    return QuadraticProgram(
        Q=m.T @ m + 1e-3 * np.eye(n_v),
        c=rng.uniform(-2.0, 2.0, size=n_v),
        A=rng.uniform(-2.0, 2.0, size=(n_c, n_v)),
        b=rng.uniform(-2.0, 2.0, size=n_c),
    )


@pytest.fixture(scope="session")
def benchmark_system():
    return make_double_integrator()
