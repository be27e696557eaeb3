import numpy as np
import pytest

from ttbsde.basis import PolynomialBasis
from ttbsde.functional import FunctionalTT
from ttbsde.tensor import TensorTrain


def random_ftt(rng, d, m, r, family="h2", extra=None, c_extra=0.0, half=1.5):
    """Random functional train on ``[-half, half]^d``."""
    basis = PolynomialBasis(m - 1, -half * np.ones(d), half * np.ones(d), family)
    ranks = [r] * (d - 1)
    tt = TensorTrain.random([m] * d, ranks, rng)
    return FunctionalTT(tt, basis, extra, c_extra)


def dense_eval(f, x):
    """Dense-sum oracle ``sum_i c_i prod_l phi_{i_l}(x_l)`` without any train contractions."""
    from ttbsde.tensor import tt_contract

    c = tt_contract(f.tt)
    (phi,) = f.basis.evaluate(np.atleast_2d(x), 0)
    out = []
    for p in phi:
        t = c
        for l in range(f.dim):
            t = np.tensordot(p[l], t, axes=(0, 0))
        out.append(float(t))
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def additive_ftt(d, power, degree=None, half=50.0):
    """Exact train for ``sum_j x_j^power`` in the monomial basis (rank 2)."""
    degree = power if degree is None else degree
    m = degree + 1
    e0, ep = np.eye(m)[0], np.eye(m)[power]
    first = np.stack([e0, ep], axis=1)[None]
    mid = np.zeros((2, m, 2))
    mid[0, :, 0], mid[0, :, 1], mid[1, :, 1] = e0, ep, e0
    last = np.stack([ep, e0], axis=0)[:, :, None]
    comps = (first, *[mid] * (d - 2), last) if d > 1 else (ep.reshape(1, m, 1),)
    basis = PolynomialBasis(degree, -half * np.ones(d), half * np.ones(d), "monomial")
    return FunctionalTT(TensorTrain(comps), basis)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abc"))):
            terminalreporter.write_line(line)
