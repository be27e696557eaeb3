"""Backward iteration over the time grid with three regression losses.

At step ``n`` the model ``phi`` is fitted to ``phi(X_n) + grad phi(X_n) . Xi = y``
on the shared path ensemble, where

* projection (explicit): ``y = h_{n+1} dt + V_{n+1}(X_{n+1})``, ``Xi = 0``;
* BSDE explicit: same ``y``, ``Xi = sqrt(dt) sigma(X_n) xi_{n+1}``;
* BSDE implicit: ``y = h_n dt + V_{n+1}(X_{n+1})`` with ``h_n`` evaluated on a
  frozen iterate of ``V_n``, repeated until the fitted values stop moving.

``h_k`` is short for ``h(X_k, t_k, V_k(X_k), sigma^T grad V_k(X_k))``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .basis import PolynomialBasis
from .functional import FunctionalTT
from .functions import SmoothFunction
from .regression import AlsConfig, RegressionProblem, fit, random_init
from .sde import PathEnsemble, PdeProblem, TimeGrid, simulate
from .tensor import TensorTrain, feasible_ranks, move_core


class LossKind(enum.Enum):
    PROJ_EXPLICIT = "proj_explicit"
    BSDE_EXPLICIT = "bsde_explicit"
    BSDE_IMPLICIT = "bsde_implicit"

    @classmethod
    def parse(cls, text) -> "LossKind":
        if isinstance(text, cls):
            return text
        key = str(text).lower().replace("-", "").replace("_", "")
        aliases = {"proj": "proj_explicit", "projection": "proj_explicit",
                   "projexplicit": "proj_explicit", "bsdeexp": "bsde_explicit",
                   "bsdeexplicit": "bsde_explicit", "explicit": "bsde_explicit",
                   "bsdeimp": "bsde_implicit", "bsdeimplicit": "bsde_implicit",
                   "implicit": "bsde_implicit"}
        if key not in aliases:
            raise ValueError(f"unknown loss kind {text!r}")
        return cls(aliases[key])

    @property
    def uses_gradient(self) -> bool:
        return self is not LossKind.PROJ_EXPLICIT


ALL_KINDS = (LossKind.PROJ_EXPLICIT, LossKind.BSDE_EXPLICIT, LossKind.BSDE_IMPLICIT)


class ImplicitNonConvergence(RuntimeWarning):
    pass


class StepError(RuntimeError):
    def __init__(self, n: int, cause: Exception):
        super().__init__(f"step {n} failed: {cause}")
        self.step = n


@dataclass
class SolverConfig:
    """Per-step fit settings.

    Attributes:
        degree: Polynomial degree of the 1-d basis (``m = degree + 1``).
        family: ``"h2"`` or ``"monomial"``.
        als: ALS settings shared by every step.
        warm_start: Initialize step ``n`` from the components of ``V_{n+1}``.
        max_outer: Cap on fixed-point iterations of the implicit loss.
        outer_tol: Sup-norm change of fitted sample values ending the implicit loop.
    """

    degree: int = 3
    family: str = "h2"
    als: AlsConfig = field(default_factory=AlsConfig)
    warm_start: bool = True
    max_outer: int = 20
    outer_tol: float = 1e-8

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "als"}
        out["als"] = self.als.to_dict()
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class StepTargets:
    y: np.ndarray
    xi: np.ndarray | None


@dataclass
class StepRecord:
    n: int
    final_loss: float
    sweeps: int
    ranks: tuple
    condition: float
    outer_iterations: int = 1
    converged: bool = True
    extrapolated: int = 0
    c_extra: float = 0.0
    wall_time: float = 0.0

    def to_dict(self, with_time: bool = False) -> dict:
        out = {
            "n": self.n, "final_loss": float(self.final_loss), "sweeps": self.sweeps,
            "ranks": list(self.ranks), "condition": float(self.condition),
            "outer_iterations": self.outer_iterations, "converged": self.converged,
            "extrapolated": self.extrapolated, "c_extra": float(self.c_extra),
        }
        if with_time:
            out["wall_time"] = self.wall_time
        return out


def nonlinearity_values(problem: PdeProblem, f, x, t) -> np.ndarray:
    """``h(x, t, f(x), sigma^T grad f(x))``."""
    return problem.nonlinearity(x, t, f(x), f.grad(x))


def assemble_targets(kind: LossKind, n: int, V_next, V_iterate, paths: PathEnsemble,
                     problem: PdeProblem) -> StepTargets:
    """Regression targets and directions of step ``n``."""
    kind = LossKind.parse(kind)
    grid = paths.grid
    dt = grid.dt
    x_n = paths.states[n]
    x_next = paths.states[n + 1]
    if kind is LossKind.BSDE_IMPLICIT:
        if V_iterate is None:
            raise ValueError("the implicit loss needs a current iterate")
        h = nonlinearity_values(problem, V_iterate, x_n, grid.t(n))
    else:
        h = nonlinearity_values(problem, V_next, x_next, grid.t(n + 1))
    y = h * dt + V_next(x_next)
    xi = None
    if kind.uses_gradient:
        xi = np.sqrt(dt) * problem.diffusion.apply(x_n, grid.t(n), paths.increments[n])
    return StepTargets(y, xi)


def _initial(n: int, x_n, V_next, problem: PdeProblem, config: SolverConfig) -> FunctionalTT:
    fallback = V_next.basis if isinstance(V_next, FunctionalTT) else None
    basis = PolynomialBasis.from_samples(config.degree, x_n, config.family, fallback)
    als = config.als
    extra = problem.terminal if als.include_terminal else None
    dims = [basis.size] * problem.d
    ranks = 1 if als.adaptive else als.ranks
    ranks = feasible_ranks(dims, ranks)
    # adaptive fits restart from the rank-one part of the warm start
    if (config.warm_start and isinstance(V_next, FunctionalTT)
            and V_next.basis.size == basis.size
            and (als.adaptive or list(V_next.tt.ranks) == ranks)):
        c_extra = V_next.c_extra if extra is not None else 0.0
        return FunctionalTT(V_next.tt, basis, extra, c_extra)
    # at the last step the terminal function itself is the natural starting point
    c_extra = 1.0 if extra is not None else 0.0
    f = random_init(basis, ranks, als.seed + n, extra, c_extra)
    if extra is not None:
        comps = list(f.tt.components)
        comps[0] = comps[0] * 1e-3
        f = f.replace(tt=move_core(TensorTrain(tuple(comps)), 0))
    return f


def solve_step(kind: LossKind, n: int, V_next, paths: PathEnsemble, problem: PdeProblem,
               config: SolverConfig, init: FunctionalTT | None = None):
    """Fit ``V_n``; returns ``(V_n, StepRecord)``."""
    kind = LossKind.parse(kind)
    start = time.perf_counter()
    x_n = paths.states[n]
    f = init if init is not None else _initial(n, x_n, V_next, problem, config)
    outer = 1
    converged = True
    if kind is LossKind.BSDE_IMPLICIT:
        iterate = V_next
        fitted_prev = V_next(x_n)
        prev_y = None
        converged = False
        outer = 0
        for _ in range(config.max_outer):
            tg = assemble_targets(kind, n, V_next, iterate, paths, problem)
            if prev_y is not None and np.array_equal(tg.y, prev_y):
                converged = True
                break
            f = fit(RegressionProblem(x_n, tg.y, tg.xi), f, config.als)
            outer += 1
            vals = f(x_n)
            change = float(np.max(np.abs(vals - fitted_prev)))
            fitted_prev, iterate, prev_y = vals, f, tg.y
            if change < config.outer_tol:
                converged = True
                break
        if not converged:
            warnings.warn(f"implicit iteration at step {n} stopped after {outer} fits",
                          ImplicitNonConvergence, stacklevel=2)
    else:
        tg = assemble_targets(kind, n, V_next, None, paths, problem)
        f = fit(RegressionProblem(x_n, tg.y, tg.xi), f, config.als)
    rec = f.diagnostics["fit"]
    record = StepRecord(n, rec.final_loss, rec.sweeps, tuple(f.tt.ranks), rec.condition,
                        outer, converged, f.basis.out_of_domain(x_n), f.c_extra,
                        time.perf_counter() - start)
    return f, record


@dataclass
class BackwardSolution:
    """``V_0 .. V_{N-1}`` as functional TTs; index ``N`` returns the terminal function."""

    functions: list
    terminal: SmoothFunction
    grid: TimeGrid
    kind: LossKind
    records: list
    problem_name: str = "problem"
    seed: int = 0
    config: SolverConfig | None = None

    def __getitem__(self, n: int):
        if n == self.grid.N:
            return self.terminal
        return self.functions[n]

    def __len__(self) -> int:
        return self.grid.N + 1

    def value_at_start(self, x0) -> float:
        return float(self.functions[0](np.atleast_2d(x0))[0])

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for n, f in enumerate(self.functions):
            (directory / f"step_{n:03d}.ftt").write_bytes(f.to_bytes())
        manifest = {
            "problem": self.problem_name,
            "grid": {"N": self.grid.N, "T": self.grid.T},
            "kind": self.kind.value,
            "config": None if self.config is None else self.config.to_dict(),
            "config_hash": None if self.config is None else self.config.digest(),
            "seed": self.seed,
            "terminal": self.terminal.name,
            "steps": [r.to_dict() for r in self.records],
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        timings = {"wall_time": [r.wall_time for r in self.records]}
        (directory / "timings.json").write_text(json.dumps(timings, indent=2))
        return directory

    @classmethod
    def load(cls, directory, terminal: SmoothFunction) -> "BackwardSolution":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        grid = TimeGrid(manifest["grid"]["N"], manifest["grid"]["T"])
        funcs = []
        for n in range(grid.N):
            buf = (directory / f"step_{n:03d}.ftt").read_bytes()
            funcs.append(FunctionalTT.from_bytes(buf, terminal))
        records = [StepRecord(s["n"], s["final_loss"], s["sweeps"], tuple(s["ranks"]),
                              s["condition"], s["outer_iterations"], s["converged"],
                              s["extrapolated"], s["c_extra"]) for s in manifest["steps"]]
        return cls(funcs, terminal, grid, LossKind(manifest["kind"]), records,
                   manifest["problem"], manifest["seed"])


def backward_solve(kind, problem: PdeProblem, grid: TimeGrid, K: int, seed: int,
                   config: SolverConfig | None = None, paths: PathEnsemble | None = None,
                   threads: int = 1) -> tuple[BackwardSolution, PathEnsemble]:
    """Simulate once, then fit ``V_{N-1}, ..., V_0`` backwards from ``V_N = g``."""
    kind = LossKind.parse(kind)
    config = config or SolverConfig()
    if paths is None:
        paths = simulate(problem, grid, K, seed, threads)
    funcs: list = [None] * grid.N
    records: list = [None] * grid.N
    V_next = problem.terminal
    for n in range(grid.N - 1, -1, -1):
        try:
            f, rec = solve_step(kind, n, V_next, paths, problem, config)
        except Exception as exc:
            raise StepError(n, exc) from exc
        f.diagnostics.pop("fit", None)
        funcs[n], records[n] = f, rec
        V_next = f
    sol = BackwardSolution(funcs, problem.terminal, grid, kind, records, problem.name, seed, config)
    return sol, paths


# -- variance diagnostics ------------------------------------------------------


@dataclass
class ExactSolution:
    """Reference ``V(x, t)`` with its spatial gradient, both batched."""

    value: Callable
    grad: Callable

    def at(self, t: float) -> "_Frozen":
        return _Frozen(self, t)


class _Frozen:
    def __init__(self, ref: ExactSolution, t: float):
        self.ref, self.t = ref, t

    def __call__(self, x):
        return self.ref.value(x, self.t)

    def grad(self, x):
        return self.ref.grad(x, self.t)


def loss_residuals(reference: ExactSolution, kind, n: int, paths: PathEnsemble,
                   problem: PdeProblem) -> np.ndarray:
    """Per-sample residual of the chosen discrete loss at ``phi = V(., t_n)``."""
    kind = LossKind.parse(kind)
    grid = paths.grid
    phi = reference.at(grid.t(n))
    tg = assemble_targets(kind, n, reference.at(grid.t(n + 1)), phi, paths, problem)
    x_n = paths.states[n]
    model = phi(x_n)
    if tg.xi is not None:
        model = model + np.einsum("kd,kd->k", phi.grad(x_n), tg.xi)
    return model - tg.y


def loss_statistics_at(reference: ExactSolution, kind, n: int, paths: PathEnsemble,
                       problem: PdeProblem) -> dict:
    """Mean and variance of the squared residual, plus the residual variance."""
    r = loss_residuals(reference, kind, n, paths, problem)
    r2 = r**2
    return {"mean": float(r2.mean()), "variance": float(r2.var(ddof=1)),
            "residual_variance": float(r.var(ddof=1)), "K": int(r.size)}


def loss_gradient_samples(reference: ExactSolution, kind, n: int, paths: PathEnsemble,
                          problem: PdeProblem, psi: SmoothFunction) -> np.ndarray:
    """Per-sample directional derivative of ``r^2`` along ``phi -> phi + eps psi``."""
    kind = LossKind.parse(kind)
    r = loss_residuals(reference, kind, n, paths, problem)
    x_n = paths.states[n]
    dmodel = psi(x_n)
    if kind.uses_gradient:
        xi = np.sqrt(paths.grid.dt) * problem.diffusion.apply(x_n, paths.grid.t(n), paths.increments[n])
        dmodel = dmodel + psi.directional(x_n, xi)
    return 2.0 * r * dmodel


def stochastic_integrals(reference: ExactSolution, problem: PdeProblem, x_start, t0: float,
                         dt: float, substeps: int, seed: int, with_quadratic: bool = False):
    """``int_{t0}^{t0+dt} (sigma^T grad V) . dW`` per start point on a fine Euler grid.

    With ``with_quadratic`` also returns ``int |sigma^T grad V|^2 ds`` along the same paths.
    """
    x = np.array(x_start, dtype=float)
    K, d = x.shape
    h = dt / substeps
    rng = np.random.Generator(np.random.Philox(key=[seed, 2**32 + 1]))
    total = np.zeros(K)
    quad = np.zeros(K)
    for j in range(substeps):
        t = t0 + j * h
        dw = rng.standard_normal((K, d)) * np.sqrt(h)
        z = problem.diffusion.apply_t(x, t, reference.grad(x, t))
        total += np.einsum("kd,kd->k", z, dw)
        quad += np.einsum("kd,kd->k", z, z) * h
        x = x + problem.drift(x, t) * h + problem.diffusion.apply(x, t, dw)
    return (total, quad) if with_quadratic else total
