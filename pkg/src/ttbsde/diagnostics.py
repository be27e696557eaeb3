"""Estimator-variance diagnostics on the heat equation with a quadratic terminal.

``V(x, t) = |x|^2 + sigma^2 d (T - t)`` solves ``dt V + sigma^2 / 2 Lap V = 0``,
so loss residuals at the exact solution isolate the estimator noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .benchmarks import heat_problem
from .functions import Affine, SeparableQuadratic
from .sde import TimeGrid, simulate
from .solver import (ALL_KINDS, ExactSolution, LossKind, loss_gradient_samples,
                     loss_statistics_at, stochastic_integrals)


def heat_quadratic_solution(T: float, sigma: float) -> ExactSolution:
    return ExactSolution(
        lambda x, t: np.einsum("kd,kd->k", x, x) + sigma**2 * x.shape[1] * (T - t),
        lambda x, t: 2.0 * x,
    )


@dataclass
class VarianceSetup:
    d: int = 1
    T: float = 1.0
    x0: float = 1.0
    sigma: float = float(np.sqrt(2.0))
    K: int = 10**4
    t_eval: float = 0.5
    substeps: int = 100
    seed: int = 0

    def problem(self):
        g = SeparableQuadratic(np.ones(self.d), np.zeros(self.d))
        return heat_problem(g, self.d, self.T, self.x0, self.sigma)

    def reference(self) -> ExactSolution:
        return heat_quadratic_solution(self.T, self.sigma)

    def ensemble(self, dt: float):
        grid = TimeGrid.from_step(self.T, dt)
        n = int(round(self.t_eval / grid.dt))
        return simulate(self.problem(), grid, self.K, self.seed), n


def variance_sweep(setup: VarianceSetup, dts=(0.1, 0.01, 0.001)) -> list:
    """Residual statistics at the exact solution plus the fine-grid oracle, per ``dt``."""
    problem = setup.problem()
    ref = setup.reference()
    rows = []
    for dt in dts:
        paths, n = setup.ensemble(dt)
        grid = paths.grid
        ints = stochastic_integrals(ref, problem, paths.states[n], grid.t(n), grid.dt,
                                    setup.substeps, setup.seed + 1)
        oracle = float(np.mean(ints**2))
        for kind in ALL_KINDS:
            st = loss_statistics_at(ref, kind, n, paths, problem)
            rows.append({"dt": grid.dt, "loss_kind": kind.value, "mean": st["mean"],
                         "variance": st["variance"], "residual_variance": st["residual_variance"],
                         "oracle": oracle})
    return rows


def gradient_variances(setup: VarianceSetup, dt: float, psi=None) -> dict:
    """Per-sample variance of the loss derivative along ``psi`` for each kind.

    Also returns the projection-loss oracle ``4 E[psi(X_n)^2 int |sigma^T grad V|^2 ds]``
    (per sample; divide by ``K`` for the variance of the empirical loss derivative).
    """
    problem = setup.problem()
    psi = psi or Affine(np.ones(setup.d))
    ref = setup.reference()
    paths, n = setup.ensemble(dt)
    out = {}
    for kind in ALL_KINDS:
        g = loss_gradient_samples(ref, kind, n, paths, problem, psi)
        out[kind.value] = float(g.var(ddof=1))
    _, quad = stochastic_integrals(ref, problem, paths.states[n], paths.grid.t(n), paths.grid.dt,
                                   setup.substeps, setup.seed + 1, with_quadratic=True)
    out["proj_oracle"] = float(4.0 * np.mean(psi(paths.states[n]) ** 2 * quad))
    out["K"] = setup.K
    return out


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


__all__ = ["VarianceSetup", "variance_sweep", "gradient_variances", "heat_quadratic_solution",
           "loglog_slope", "LossKind"]
