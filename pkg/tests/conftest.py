from __future__ import annotations

import math
import time

import numpy as np
import pytest

from slagfib.fibration import BaseGrid, build_fibration, check_embedding
from slagfib.flat_model import GroupAction, build_flat_structure, flat_perturbed, generate_structure
from slagfib.lattice import Lattice
from slagfib.solver import SolverContext, certify_hypotheses

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="session")
def lattice2():
    return Lattice.cubic(2, TWO_PI)


@pytest.fixture(scope="session")
def flat2(lattice2):
    return flat_perturbed(build_flat_structure(2, lattice2, 1.0))


@pytest.fixture(scope="session")
def pert2(lattice2):
    return generate_structure(2, lattice2, 1.0, 1e-2, seed=0)


@pytest.fixture(scope="session")
def ctx2(pert2):
    return SolverContext(pert2, 8)


@pytest.fixture(scope="session")
def cert2(pert2, ctx2):
    return certify_hypotheses(pert2, context=ctx2)


@pytest.fixture(scope="session")
def flip_structure(lattice2):
    return generate_structure(2, lattice2, 1.0, 1e-2, seed=5, action=GroupAction.flip(lattice2))


@pytest.fixture(scope="session")
def flat_ctx(flat2):
    return SolverContext(flat2, 8, probes=16)


@pytest.fixture(scope="session")
def flat_cert(flat2, flat_ctx):
    return certify_hypotheses(flat2, context=flat_ctx)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def flip_run(flip_structure):
    """Certificate and 9 x 9 fibration over [-1, 1]^2 with the flip action, with wall-clock timings."""
    t0 = time.perf_counter()
    ctx = SolverContext(flip_structure, 8)
    cert = certify_hypotheses(flip_structure, context=ctx)
    t1 = time.perf_counter()
    grid = BaseGrid.square(2, 1.0, 9, cert.r, GroupAction.flip(flip_structure.lattice))
    fib = build_fibration(flip_structure, cert, grid, threads=4, context=ctx)
    t2 = time.perf_counter()
    return {"ctx": ctx, "cert": cert, "fibration": fib, "certify_seconds": t1 - t0, "build_seconds": t2 - t1}


@pytest.fixture(scope="session")
def flip_ctx(flip_run):
    return flip_run["ctx"]


@pytest.fixture(scope="session")
def flip_cert(flip_run):
    return flip_run["cert"]


@pytest.fixture(scope="session")
def flip_fibration(flip_run):
    return flip_run["fibration"]


@pytest.fixture(scope="session")
def flip_embedding(flip_fibration):
    return check_embedding(flip_fibration)
