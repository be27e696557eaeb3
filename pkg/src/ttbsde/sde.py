"""Semilinear parabolic problems and Euler-Maruyama path ensembles.

A problem is ``dt V + b . grad V + 1/2 Tr(sigma sigma^T Hess V) + h(x, t, V, sigma^T grad V) = 0``
with ``V(., T) = g``.  Paths are generated from a counter-based stream so path
``k`` depends only on ``(seed, k)``, never on batching or thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .functions import SmoothFunction

# shifts uniforms on [0, 1) into the open interval before the inverse CDF
_HALF_ULP = 2.0**-54


class NonFiniteStateError(FloatingPointError):
    def __init__(self, n: int, k: int):
        super().__init__(f"non-finite state at step {n}, path {k}")
        self.step = n
        self.path = k


# -- diffusion coefficients ----------------------------------------------


class Diffusion:
    """``sigma(x, t)`` acting on batches; subclasses fix the structure."""

    def apply(self, x, t, v) -> np.ndarray:
        """``sigma(x, t) v`` per sample."""
        return np.einsum("kij,kj->ki", self.matrix(x, t), v)

    def apply_t(self, x, t, v) -> np.ndarray:
        """``sigma(x, t)^T v`` per sample."""
        return np.einsum("kji,kj->ki", self.matrix(x, t), v)

    def matrix(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def generator_term(self, f, x, t) -> np.ndarray:
        """``1/2 Tr(sigma sigma^T Hess f)`` for a function with second-order methods."""
        raise NotImplementedError


@dataclass
class ScalarDiffusion(Diffusion):
    """``sigma = s I``."""

    scale: float

    def apply(self, x, t, v):
        return self.scale * np.asarray(v)

    def apply_t(self, x, t, v):
        return self.scale * np.asarray(v)

    def matrix(self, x, t):
        K, d = np.shape(x)
        return np.broadcast_to(self.scale * np.eye(d), (K, d, d)).copy()

    def generator_term(self, f, x, t):
        return 0.5 * self.scale**2 * f.laplacian(x)


@dataclass
class DiagonalDiffusion(Diffusion):
    """``sigma = diag(s(x, t))`` with ``s`` returning ``(K, d)``."""

    diag: Callable

    def apply(self, x, t, v):
        return self.diag(x, t) * v

    def apply_t(self, x, t, v):
        return self.diag(x, t) * v

    def matrix(self, x, t):
        s = self.diag(x, t)
        return s[:, :, None] * np.eye(s.shape[1])

    def generator_term(self, f, x, t):
        return 0.5 * f.laplacian(x, self.diag(x, t) ** 2)


@dataclass
class DenseDiffusion(Diffusion):
    """General ``sigma(x, t)`` returning ``(K, d, d)``."""

    fn: Callable

    def matrix(self, x, t):
        return self.fn(x, t)

    def generator_term(self, f, x, t):
        s = self.matrix(x, t)
        return 0.5 * sum(f.second_directional(x, s[:, :, j]) for j in range(s.shape[2]))


@dataclass
class RankOnePlusFloor(Diffusion):
    """Symmetric square root of ``v v^T + eps^2 I`` for a vector field ``v(x, t)``.

    ``sigma = eps I + (sqrt(|v|^2 + eps^2) - eps) vhat vhat^T``.
    """

    vector: Callable
    eps: float = 1e-6

    def _parts(self, x, t):
        v = self.vector(x, t)
        nv = np.linalg.norm(v, axis=1)
        safe = np.where(nv > 0, nv, 1.0)
        vhat = v / safe[:, None]
        alpha = np.sqrt(nv**2 + self.eps**2) - self.eps
        return v, vhat, alpha

    def apply(self, x, t, w):
        _, vhat, alpha = self._parts(x, t)
        return self.eps * w + (alpha * np.einsum("kd,kd->k", vhat, w))[:, None] * vhat

    apply_t = apply

    def matrix(self, x, t):
        _, vhat, alpha = self._parts(x, t)
        d = vhat.shape[1]
        return self.eps * np.eye(d) + alpha[:, None, None] * np.einsum("ki,kj->kij", vhat, vhat)

    def generator_term(self, f, x, t):
        v, _, _ = self._parts(x, t)
        return 0.5 * (f.second_directional(x, v) + self.eps**2 * f.laplacian(x))


# -- problem, grid, paths ---------------------------------------------------


@dataclass
class PdeProblem:
    """Coefficients of a semilinear parabolic terminal-value problem.

    Attributes:
        d: Spatial dimension.
        T: Horizon.
        drift: ``b(x, t)`` returning ``(K, d)``.
        diffusion: A :class:`Diffusion`.
        h: Nonlinearity ``h(x, t, y, z)`` with ``z = sigma^T grad V``.
        terminal: ``g`` as a :class:`SmoothFunction`.
        x0: Initial point of the forward process.
        name: Identifier used in reports.
        counters: Event counts (for example clamped square roots).
    """

    d: int
    T: float
    drift: Callable
    diffusion: Diffusion
    h: Callable
    terminal: SmoothFunction
    x0: np.ndarray
    name: str = "problem"
    counters: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.x0 = np.broadcast_to(np.asarray(self.x0, dtype=float), (self.d,)).copy()

    def b(self, x, t):
        return self.drift(x, t)

    def nonlinearity(self, x, t, y, grad):
        """``h(x, t, y, sigma^T grad)``."""
        return self.h(x, t, y, self.diffusion.apply_t(x, t, grad))

    def generator(self, f, x, t) -> np.ndarray:
        """``L f = b . grad f + 1/2 Tr(sigma sigma^T Hess f)``."""
        return (np.einsum("kd,kd->k", self.drift(x, t), f.grad(x))
                + self.diffusion.generator_term(f, x, t))

    def is_nondegenerate(self, x, t=0.0, tol=1e-14) -> bool:
        s = self.diffusion.matrix(np.atleast_2d(x), t)
        return bool(np.all(np.linalg.eigvalsh(s @ np.swapaxes(s, 1, 2))[:, 0] > tol))


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float

    def __post_init__(self):
        if self.N < 1 or self.T <= 0:
            raise ValueError("need N >= 1 and T > 0")

    @classmethod
    def from_step(cls, T: float, dt: float) -> "TimeGrid":
        return cls(int(round(T / dt)), T)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def t(self, n: int) -> float:
        return self.T if n == self.N else n * self.dt


@dataclass
class PathEnsemble:
    """``states[n, k]`` for ``n = 0..N`` and ``increments[n, k] = xi_{n+1}``."""

    states: np.ndarray
    increments: np.ndarray
    grid: TimeGrid
    seed: int

    @property
    def K(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def dump(self, directory) -> Path:
        """Write ``states.bin`` / ``increments.bin`` (f64 LE, ``[n][k][coord]``) plus a sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.states.astype("<f8").tofile(directory / "states.bin")
        self.increments.astype("<f8").tofile(directory / "increments.bin")
        meta = {"d": self.d, "N": self.grid.N, "K": self.K, "dt": self.grid.dt,
                "T": self.grid.T, "seed": self.seed}
        (directory / "paths.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "PathEnsemble":
        directory = Path(directory)
        meta = json.loads((directory / "paths.json").read_text())
        N, K, d = meta["N"], meta["K"], meta["d"]
        states = np.fromfile(directory / "states.bin", dtype="<f8").reshape(N + 1, K, d)
        incs = np.fromfile(directory / "increments.bin", dtype="<f8").reshape(N, K, d)
        return cls(states, incs, TimeGrid(N, meta["T"]), meta["seed"])


def path_normals(seed: int, k: int, N: int, d: int) -> np.ndarray:
    """Standard normals of path ``k``, shape ``(N, d)``; counter ``n d + coord``."""
    gen = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), k]))
    return ndtri(gen.random(N * d) + _HALF_ULP).reshape(N, d)


def ensemble_normals(seed: int, K: int, N: int, d: int, threads: int = 1) -> np.ndarray:
    """All increments, shape ``(N, K, d)``; identical for any ``threads``."""
    out = np.empty((N, K, d))

    def fill(ks):
        for k in ks:
            out[:, k, :] = path_normals(seed, k, N, d)

    chunks = np.array_split(np.arange(K), max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, chunks))
    else:
        fill(range(K))
    return out


def simulate(problem: PdeProblem, grid: TimeGrid, K: int, seed: int, threads: int = 1) -> PathEnsemble:
    """Euler-Maruyama: ``X_{n+1} = X_n + b dt + sigma xi_{n+1} sqrt(dt)``."""
    if K < 1:
        raise ValueError("K must be positive")
    xi = ensemble_normals(seed, K, grid.N, problem.d, threads)
    states = np.empty((grid.N + 1, K, problem.d))
    states[0] = problem.x0
    dt = grid.dt
    sq = np.sqrt(dt)
    for n in range(grid.N):
        x = states[n]
        t = grid.t(n)
        nxt = x + problem.drift(x, t) * dt + problem.diffusion.apply(x, t, xi[n]) * sq
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            raise NonFiniteStateError(n + 1, int(np.argmax(bad)))
        states[n + 1] = nxt
    return PathEnsemble(states, xi, grid, seed)
