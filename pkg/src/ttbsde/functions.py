"""Closed-form smooth functions used as terminal conditions and model augmentations.

Every function works on batches ``x`` of shape ``(K, d)`` and exposes the
derivative information the solver and the PDE-residual metric need.
"""

from __future__ import annotations

import numpy as np


class SmoothFunction:
    """Interface: values, gradients and second-order directional information."""

    name = "function"

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def directional(self, x, xi) -> np.ndarray:
        return np.einsum("kd,kd->k", self.grad(x), xi)

    def laplacian(self, x, weights=None) -> np.ndarray:
        """``sum_j w_j d^2 f / dx_j^2`` (plain Laplacian when ``weights`` is None)."""
        raise NotImplementedError

    def second_directional(self, x, w) -> np.ndarray:
        """``w^T Hess f w`` per sample."""
        raise NotImplementedError


class Constant(SmoothFunction):
    name = "constant"

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, x):
        return np.full(np.shape(x)[0], self.value)

    def grad(self, x):
        return np.zeros(np.shape(x))

    def laplacian(self, x, weights=None):
        return np.zeros(np.shape(x)[0])

    def second_directional(self, x, w):
        return np.zeros(np.shape(x)[0])


class Affine(SmoothFunction):
    """``a . x + c``."""

    name = "affine"

    def __init__(self, slope, offset: float = 0.0):
        self.slope = np.asarray(slope, dtype=float)
        self.offset = float(offset)

    def __call__(self, x):
        return np.asarray(x) @ self.slope + self.offset

    def grad(self, x):
        return np.broadcast_to(self.slope, np.shape(x)).copy()

    def laplacian(self, x, weights=None):
        return np.zeros(np.shape(x)[0])

    def second_directional(self, x, w):
        return np.zeros(np.shape(x)[0])


class SeparableQuadratic(SmoothFunction):
    """``sum_i nu_i (x_i - c_i)^2``."""

    name = "separable_quadratic"

    def __init__(self, weights, center):
        self.weights = np.asarray(weights, dtype=float)
        self.center = np.asarray(center, dtype=float)

    def __call__(self, x):
        return ((np.asarray(x) - self.center) ** 2) @ self.weights

    def grad(self, x):
        return 2.0 * self.weights * (np.asarray(x) - self.center)

    def laplacian(self, x, weights=None):
        diag = np.broadcast_to(2.0 * self.weights, np.shape(x))
        if weights is not None:
            diag = diag * weights
        return diag.sum(axis=1)

    def second_directional(self, x, w):
        return (2.0 * self.weights * np.asarray(w) ** 2).sum(axis=1)


class LogQuadratic(SmoothFunction):
    """``log(1/2 + 1/2 |x|^2)``, the terminal cost of the log-HJB benchmark."""

    name = "log_quadratic"

    def __call__(self, x):
        x = np.asarray(x)
        return np.log(0.5 + 0.5 * np.einsum("kd,kd->k", x, x))

    def _q(self, x):
        return 0.5 + 0.5 * np.einsum("kd,kd->k", x, x)

    def grad(self, x):
        x = np.asarray(x)
        return x / self._q(x)[:, None]

    def laplacian(self, x, weights=None):
        x = np.asarray(x)
        q = self._q(x)[:, None]
        diag = 1.0 / q - x**2 / q**2
        if weights is not None:
            diag = diag * weights
        return diag.sum(axis=1)

    def second_directional(self, x, w):
        x = np.asarray(x)
        q = self._q(x)
        xw = np.einsum("kd,kd->k", x, w)
        return np.einsum("kd,kd->k", w, w) / q - xw**2 / q**2
