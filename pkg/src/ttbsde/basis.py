"""One-dimensional polynomial bases shared across the modes of a functional TT."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as leg

FAMILIES = ("h2", "monomial")


def sample_domain(x, lower_q: float = 0.001, upper_q: float = 0.999, pad: float = 0.1,
                  min_halfwidth: float = 1e-6):
    """Per-dimension box from sample quantiles, padded by ``pad`` of the range.

    Returns ``(a, b, degenerate)`` where ``degenerate`` flags dimensions whose
    samples have (numerically) zero spread.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo = np.quantile(x, lower_q, axis=0)
    hi = np.quantile(x, upper_q, axis=0)
    width = hi - lo
    degenerate = width <= min_halfwidth * np.maximum(1.0, np.abs(lo))
    a = lo - pad * width
    b = hi + pad * width
    return a, b, degenerate


@dataclass(frozen=True)
class PolynomialBasis:
    """Polynomials of degree ``<= degree`` on a per-dimension interval.

    ``family="h2"`` orthonormalizes Legendre polynomials in ``H^2([a, b])`` with
    the normalized measure ``dx / (b - a)`` (equivalently Gram-Schmidt on the
    monomials), so the constant function is exactly 1 and products over many
    dimensions stay O(1); ``family="monomial"`` uses raw
    powers ``1, x, ..., x^p``, for which the interval only marks the
    extrapolation boundary.
    """

    degree: int
    lower: np.ndarray
    upper: np.ndarray
    family: str = "h2"
    _coef: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or np.any(upper <= lower):
            raise ValueError("need lower < upper in every dimension")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if self.family == "h2":
            half = 0.5 * (upper - lower)
            coef = np.stack([_h2_coefficients(self.degree, hw) for hw in half])
            # derivative k of the basis in Legendre coefficients: coef @ D_k / half^k
            derived = [np.einsum("dij,jl->dil", coef, _legder_matrix(self.degree, k))
                       / half[:, None, None] ** k for k in range(3)]
            object.__setattr__(self, "_coef", np.stack(derived))

    @classmethod
    def from_samples(cls, degree: int, x, family: str = "h2", fallback=None):
        a, b, degenerate = sample_domain(x)
        if np.any(degenerate):
            if fallback is not None:
                a = np.where(degenerate, fallback.lower, a)
                b = np.where(degenerate, fallback.upper, b)
            else:
                center = 0.5 * (a + b)
                a = np.where(degenerate, center - 1.0, a)
                b = np.where(degenerate, center + 1.0, b)
        return cls(degree, a, b, family)

    @property
    def size(self) -> int:
        return self.degree + 1

    @property
    def dim(self) -> int:
        return self.lower.size

    def out_of_domain(self, x) -> int:
        x = np.asarray(x, dtype=float)
        return int(np.sum((x < self.lower) | (x > self.upper)))

    def evaluate(self, x, derivatives: int = 0):
        """Basis values and derivatives at points ``x`` of shape ``(K, d)``.

        Returns a list ``[Phi, Phi', ...]`` with ``derivatives + 1`` arrays of
        shape ``(K, d, m)``.
        """
        x = np.asarray(x, dtype=float)
        if self.family == "monomial":
            return _monomial_values(x, self.degree, derivatives)
        if derivatives > 2:
            raise ValueError("at most second derivatives are available")
        half = 0.5 * (self.upper - self.lower)
        s = (x - 0.5 * (self.upper + self.lower)) / half
        van = leg.legvander(s, self.degree)
        return [np.einsum("kdj,dij->kdi", van, self._coef[k]) for k in range(derivatives + 1)]


def _monomial_values(x, degree, derivatives):
    powers = np.arange(degree + 1)
    out = []
    for k in range(derivatives + 1):
        factor = np.ones(degree + 1)
        for j in range(k):
            factor = factor * (powers - j)
        exps = np.clip(powers - k, 0, None)
        out.append(factor * x[..., None] ** exps)
    return out


def _legder_matrix(degree: int, order: int) -> np.ndarray:
    """Row j holds the Legendre coefficients of the ``order``-th derivative of P_j."""
    m = degree + 1
    out = np.zeros((m, m))
    for j in range(m):
        c = leg.legder(np.eye(m)[j], order) if order else np.eye(m)[j]
        out[j, : c.size] = c
    return out


def _h2_coefficients(degree: int, halfwidth: float) -> np.ndarray:
    """Rows give H^2-orthonormal polynomials in the Legendre basis of ``[-1, 1]``.

    The interval ``[a, b]`` is mapped to ``[-1, 1]`` with scale ``halfwidth``;
    the Gram matrix under ``dx / (b - a)`` is computed with Gauss-Legendre
    quadrature (exact for the polynomial integrands) and inverted through its
    Cholesky factor.
    """
    m = degree + 1
    nodes, weights = leg.leggauss(m + 1)
    weights = 0.5 * weights
    gram = np.zeros((m, m))
    eye = np.eye(m)
    for k in range(3):
        van = np.stack([leg.legval(nodes, leg.legder(eye[j], k)) for j in range(m)], axis=1)
        van = van / halfwidth**k
        gram += van.T @ (weights[:, None] * van)
    chol = np.linalg.cholesky(gram)
    return np.linalg.inv(chol)


def h2_gram(basis: PolynomialBasis, dim: int = 0, nodes: int = 64) -> np.ndarray:
    """H^2 Gram matrix under ``dx / (b - a)`` in one dimension by fine quadrature."""
    a, b = basis.lower[dim], basis.upper[dim]
    t, w = leg.leggauss(nodes)
    x = 0.5 * (b - a) * t + 0.5 * (a + b)
    w = 0.5 * w
    pts = np.tile(a, (nodes, basis.dim))
    pts[:, dim] = x
    vals = basis.evaluate(pts, derivatives=2)
    gram = np.zeros((basis.size, basis.size))
    for v in vals:
        v = v[:, dim, :]
        gram += v.T @ (w[:, None] * v)
    return gram
