"""Benchmark problems, reference oracles and error metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.special import logsumexp

from .functions import Constant, LogQuadratic, SeparableQuadratic, SmoothFunction
from .sde import DiagonalDiffusion, PdeProblem, RankOnePlusFloor, ScalarDiffusion

SQRT2 = math.sqrt(2.0)
CSV_COLUMNS = ("problem", "d", "loss_kind", "E_rel", "E_RMSE", "E_PDE", "E_ref", "time_s", "M", "seed")


def _zero_drift(x, t):
    return np.zeros_like(x)


def _hjb_h(x, t, y, z):
    return -0.5 * np.einsum("kd,kd->k", z, z)


def _zero_h(x, t, y, z):
    return np.zeros(np.shape(x)[0])


# -- problems ----------------------------------------------------------------


def hjb_log_problem(d: int = 100, T: float = 1.0, x0=0.0) -> PdeProblem:
    """``(dt + Lap) V - |grad V|^2 = 0`` with ``g = log(1/2 + |x|^2 / 2)``."""
    return PdeProblem(d, T, _zero_drift, ScalarDiffusion(SQRT2), _hjb_h, LogQuadratic(),
                      np.full(d, x0, dtype=float), name="hjb_log")


def heat_problem(terminal: SmoothFunction, d: int = 1, T: float = 1.0, x0=0.0,
                 sigma: float = SQRT2) -> PdeProblem:
    """Linear heat equation ``dt V + sigma^2 / 2 Lap V = 0``."""
    return PdeProblem(d, T, _zero_drift, ScalarDiffusion(sigma), _zero_h, terminal,
                      np.full(d, x0, dtype=float), name="heat")


def coupling_matrix(d: int, seed: int, std: float = 0.1) -> np.ndarray:
    """``C = I + xi`` with i.i.d. ``xi_ij ~ N(0, std^2)``, redrawn until positive definite."""
    rng = np.random.default_rng(seed)
    while True:
        C = np.eye(d) + std * rng.standard_normal((d, d))
        if np.linalg.eigvalsh(0.5 * (C + C.T))[0] > 0:
            return C


class DoubleWellDrift:
    """``b = -grad Psi`` with ``Psi(x) = sum_ij C_ij (x_i^2 - 1)(x_j^2 - 1)``."""

    def __init__(self, C):
        self.C = np.asarray(C, dtype=float)
        self.S = self.C + self.C.T

    def potential(self, x):
        q = x**2 - 1.0
        return np.einsum("ki,ij,kj->k", q, self.C, q)

    def __call__(self, x, t=0.0):
        q = x**2 - 1.0
        return -2.0 * x * (q @ self.S.T)


def double_well_problem(d: int, C, nu, T: float, x0=-1.0, sigma: float = SQRT2) -> PdeProblem:
    """HJB with double-well drift, ``sigma = s I`` and ``g = sum nu_i (x_i - 1)^2``.

    ``h = -|sigma^T grad V|^2 / 2``, so ``exp(-V)`` solves a linear backward equation.
    """
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (d,)).copy()
    name = "double_well_diag" if np.allclose(C, np.diag(np.diag(C))) else "double_well"
    return PdeProblem(d, T, DoubleWellDrift(C), ScalarDiffusion(sigma), _hjb_h,
                      SeparableQuadratic(nu, np.ones(d)), np.full(d, x0, dtype=float), name=name)


@dataclass
class CirParameters:
    a: np.ndarray
    b: np.ndarray
    gamma: np.ndarray

    @classmethod
    def sample(cls, d: int, seed: int) -> "CirParameters":
        u = np.random.default_rng(seed).uniform(0.0, 1.0, size=(3, d))
        return cls(u[0], u[1], u[2])


def cir_problem(d: int = 100, seed: int = 0, T: float = 1.0, x0=1.0,
                diffusion: str = "diagonal", eps: float = 1e-6) -> PdeProblem:
    """Bond price in a multidimensional CIR model.

    ``diffusion="diagonal"`` uses ``diag(gamma_i sqrt(x_i))``; ``"rank_one"``
    uses the symmetric square root of ``(gamma_i gamma_j sqrt(x_i x_j))_ij + eps^2 I``.
    The rank-one variant drives all coordinates with one Brownian motion, so the
    samples lie close to a curve and the backward regressions are ill-posed.  Negative coordinates are clamped to zero
    inside square roots and counted in ``problem.counters["clamped"]``.
    """
    p = CirParameters.sample(d, seed)
    counters = {"clamped": 0}

    def root(x):
        neg = x < 0
        if neg.any():
            counters["clamped"] += int(neg.sum())
        return p.gamma * np.sqrt(np.maximum(x, 0.0))

    def drift(x, t):
        return p.a * (p.b - x)

    def h(x, t, y, z):
        return -np.max(x, axis=1) * y

    if diffusion == "rank_one":
        diff = RankOnePlusFloor(lambda x, t: root(x), eps)
    elif diffusion == "diagonal":
        diff = DiagonalDiffusion(lambda x, t: root(x))
    else:
        raise ValueError(f"unknown CIR diffusion variant {diffusion!r}")
    prob = PdeProblem(d, T, drift, diff, h, Constant(1.0), np.full(d, x0, dtype=float),
                      name="cir", counters=counters)
    prob.parameters = p
    return prob


# -- reference oracles -----------------------------------------------------------


@dataclass
class ReferenceValue:
    value: float
    stderr: float
    M: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _log_mean_exp_neg(chunks_g):
    """``-log mean exp(-g)`` over all chunks with a delta-method standard error."""
    logs, total = [], 0
    s1, s2, shift = 0.0, 0.0, None
    for g in chunks_g:
        if shift is None:
            shift = float(np.min(g))
        w = np.exp(-(g - shift))
        s1 += float(w.sum())
        s2 += float((w**2).sum())
        logs.append(logsumexp(-g))
        total += g.size
    value = float(-(logsumexp(logs) - math.log(total)))
    mean = s1 / total
    var = max(s2 / total - mean**2, 0.0) * total / max(total - 1, 1)
    stderr = math.sqrt(var / total) / mean
    return value, stderr, total


def hjb_reference(x, t: float, T: float = 1.0, M: int = 10**6, seed: int = 0,
                  sigma: float = SQRT2, terminal: SmoothFunction | None = None,
                  chunk: int = 2**16) -> ReferenceValue:
    """``V(x, t) = -log E exp(-g(x + sqrt(T - t) sigma xi))``."""
    g = terminal or LogQuadratic()
    x = np.asarray(x, dtype=float).reshape(-1)
    if t >= T:
        return ReferenceValue(float(g(x[None])[0]), 0.0, M, seed)
    scale = math.sqrt(T - t) * sigma

    def chunks():
        done, c = 0, 0
        while done < M:
            n = min(chunk, M - done)
            rng = np.random.Generator(np.random.Philox(key=[seed, c]))
            yield g(x + scale * rng.standard_normal((n, x.size)))
            done += n
            c += 1

    value, se, total = _log_mean_exp_neg(chunks())
    return ReferenceValue(value, se, total, seed)


def double_well_reference_mc(x, t: float, problem: PdeProblem, M: int = 10**6, seed: int = 0,
                             inner_dt: float = 0.01, chunk: int = 2**16,
                             extrapolate: bool = False) -> ReferenceValue:
    """``V(x, t) = -log E[exp(-g(X_T)) | X_t = x]`` by Euler-Maruyama Monte Carlo.

    With ``extrapolate`` each path is also run at step ``inner_dt / 2`` on the same
    Brownian motion and the result is ``2 V_fine - V_coarse`` (removes the O(dt) bias).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    g = problem.terminal
    if t >= problem.T:
        return ReferenceValue(float(g(x[None])[0]), 0.0, M, seed)
    steps = max(1, int(round((problem.T - t) / inner_dt)))
    h = (problem.T - t) / steps

    def step(X, s, dw, dt):
        return X + problem.drift(X, s) * dt + problem.diffusion.apply(X, s, dw)

    def chunks():
        done, c = 0, 0
        while done < M:
            n = min(chunk, M - done)
            rng = np.random.Generator(np.random.Philox(key=[seed, c]))
            X = np.tile(x, (n, 1))
            if not extrapolate:
                for j in range(steps):
                    X = step(X, t + j * h, rng.standard_normal(X.shape) * math.sqrt(h), h)
                out = g(X)
            else:
                Y = X.copy()
                for j in range(steps):
                    s = t + j * h
                    w1 = rng.standard_normal(X.shape) * math.sqrt(h / 2)
                    w2 = rng.standard_normal(X.shape) * math.sqrt(h / 2)
                    Y = step(Y, s, w1 + w2, h)
                    X = step(step(X, s, w1, h / 2), s + h / 2, w2, h / 2)
                out = np.stack([g(X), g(Y)])
            if not np.all(np.isfinite(out)):
                raise FloatingPointError("non-finite terminal values in reference simulation")
            yield out
            done += n
            c += 1

    if not extrapolate:
        value, se, total = _log_mean_exp_neg(chunks())
        return ReferenceValue(value, se, total, seed)
    return _extrapolated(chunks(), seed)


def _extrapolated(chunks_g, seed) -> ReferenceValue:
    """``2 V_fine - V_coarse`` from stacked ``(fine, coarse)`` samples, delta-method error."""
    shift, total = None, 0
    s = np.zeros(2)
    ss = np.zeros((2, 2))
    for g in chunks_g:
        if shift is None:
            shift = float(np.min(g))
        w = np.exp(-(g - shift))
        s += w.sum(axis=1)
        ss += w @ w.T
        total += g.shape[1]
    mean = s / total
    cov = (ss / total - np.outer(mean, mean)) * total / max(total - 1, 1)
    values = shift - np.log(mean)
    grad = np.array([-2.0, 1.0]) / mean
    se = math.sqrt(max(grad @ cov @ grad, 0.0) / total)
    return ReferenceValue(float(2 * values[0] - values[1]), se, total, seed)


@dataclass
class FdSolution1d:
    """Grid solution ``V(x, t)`` of one decoupled coordinate."""

    nodes: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (len(times), len(nodes))

    def __call__(self, x, t):
        j = int(np.argmin(np.abs(self.times - t)))
        return np.interp(x, self.nodes, self.values[j])


def _double_well_1d(c: float, nu: float, T: float, nodes: int, steps: int,
                    bounds=(-3.0, 3.0), keep_every: int | None = None,
                    diffusivity: float = 1.0) -> FdSolution1d:
    """Crank-Nicolson for ``psi = exp(-V)``: ``dt psi + b psi' + D psi'' = 0`` backwards from ``T``.

    ``b = -4 c x (x^2 - 1)`` and ``D = sigma^2 / 2``; homogeneous Neumann
    conditions at both ends.
    """
    xs = np.linspace(bounds[0], bounds[1], nodes)
    hx = xs[1] - xs[0]
    b = -4.0 * c * xs * (xs**2 - 1.0)
    D = diffusivity
    lower = D / hx**2 - b[1:] / (2 * hx)
    upper = D / hx**2 + b[:-1] / (2 * hx)
    main = np.full(nodes, -2.0 * D / hx**2)
    # reflected ghost nodes give the Neumann condition
    upper[0] = 2.0 * D / hx**2
    lower[-1] = 2.0 * D / hx**2
    A = scipy.sparse.diags([lower, main, upper], [-1, 0, 1], format="csc")
    ht = T / steps
    eye = scipy.sparse.identity(nodes, format="csc")
    lhs = scipy.sparse.linalg.splu((eye - 0.5 * ht * A).tocsc())
    rhs = (eye + 0.5 * ht * A).tocsr()
    psi = np.exp(-nu * (xs - 1.0) ** 2)
    keep_every = keep_every or steps
    times = [T]
    vals = [-np.log(psi)]
    for j in range(1, steps + 1):
        psi = lhs.solve(rhs @ psi)
        if j % keep_every == 0 or j == steps:
            times.append(T - j * ht)
            vals.append(-np.log(psi))
    order = np.argsort(times)
    return FdSolution1d(xs, np.asarray(times)[order], np.asarray(vals)[order])


@dataclass
class FactorizedReference:
    value: float
    coarse_value: float
    richardson: float

    @property
    def refinement_change(self) -> float:
        return abs(self.value - self.coarse_value)

    def to_dict(self) -> dict:
        return {"value": self.value, "coarse_value": self.coarse_value,
                "richardson": self.richardson, "refinement_change": self.refinement_change}


def double_well_reference_factorized(x, t: float, problem: PdeProblem, nodes: int = 2000,
                                     steps: int = 2000, bounds=(-3.0, 3.0)) -> FactorizedReference:
    """Sum of one-dimensional finite-difference solutions (diagonal ``C`` only)."""
    C = problem.drift.C
    if not np.allclose(C, np.diag(np.diag(C))):
        raise ValueError("factorized reference needs a diagonal coupling matrix")
    x = np.asarray(x, dtype=float).reshape(-1)
    nu = problem.terminal.weights
    if t >= problem.T:
        v = float(problem.terminal(x[None])[0])
        return FactorizedReference(v, v, v)
    tau = problem.T - t
    diffusivity = 0.5 * problem.diffusion.scale**2
    cache: dict = {}

    def total(n_nodes, n_steps):
        out = 0.0
        for i in range(problem.d):
            key = (C[i, i], nu[i], n_nodes, n_steps)
            if key not in cache:
                cache[key] = _double_well_1d(C[i, i], nu[i], tau, n_nodes, n_steps, bounds,
                                             diffusivity=diffusivity)
            sol = cache[key]
            out += float(np.interp(x[i], sol.nodes, sol.values[0]))
        return out

    fine = total(nodes, steps)
    coarse = total(nodes // 2, steps // 2)
    # second-order scheme: extrapolate with factor 4
    return FactorizedReference(fine, coarse, fine + (fine - coarse) / 3.0)


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricReport:
    problem: str
    d: int
    loss_kind: str
    E_rel: float | None
    E_RMSE: float | None
    E_PDE: float
    E_ref: float | None = None
    time_s: float | None = None
    M: int = 1
    seed: int = 0
    V0: float | None = None
    extra: dict = field(default_factory=dict)

    def row(self, with_time: bool = False) -> list:
        """CSV cells in the fixed column order; absent values and untimed runs are blank."""
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if col == "time_s" and not with_time:
                v = None
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(**data)

    @classmethod
    def from_row(cls, row: dict) -> "MetricReport":
        def num(key, kind=float):
            return None if row[key] in ("", None) else kind(row[key])

        return cls(row["problem"], int(row["d"]), row["loss_kind"], num("E_rel"), num("E_RMSE"),
                   num("E_PDE"), num("E_ref"), num("time_s"), int(row["M"]), int(row["seed"]))


def reports_to_csv(reports, with_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.row(with_time))
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    return [MetricReport.from_row(r) for r in csv.DictReader(io.StringIO(text))]


def pde_residuals(solution, paths, problem: PdeProblem, n: int) -> np.ndarray:
    """``(dt + L) V + h`` at ``X_n`` with analytic space derivatives.

    ``dt V`` is a forward difference ``(V_{n+1} - V_n) / dt`` and, at ``n = N``,
    the backward difference ``(V_N - V_{N-1}) / dt``.
    """
    grid = paths.grid
    x = paths.states[n]
    t = grid.t(n)
    V = solution[n]
    vals = V(x)
    if n < grid.N:
        dt_v = (solution[n + 1](x) - vals) / grid.dt
    else:
        dt_v = (vals - solution[n - 1](x)) / grid.dt
    return dt_v + problem.generator(V, x, t) + problem.nonlinearity(x, t, vals, V.grad(x))


def compute_metrics(solution, paths, problem: PdeProblem, reference: float | None = None,
                    reference_fn=None, seed: int = 0, time_s: float | None = None) -> MetricReport:
    """Single-run metrics; ``E_RMSE`` of one run is ``|V_0(x_0) - V_ref|``."""
    v0 = solution.value_at_start(problem.x0)
    e_rel = e_rmse = None
    extra = {}
    if reference is not None:
        e_rmse = abs(v0 - reference)
        if reference == 0.0:
            e_rel = e_rmse
            extra["E_rel_absolute"] = True
        else:
            e_rel = e_rmse / abs(reference)
    N = paths.grid.N
    e_pde = float(np.mean([np.mean(pde_residuals(solution, paths, problem, n) ** 2)
                           for n in range(1, N + 1)]))
    e_ref = None
    if reference_fn is not None:
        terms = []
        for n in range(N + 1):
            x = paths.states[n]
            ref = reference_fn(x, paths.grid.t(n))
            terms.append(np.mean(np.abs((solution[n](x) - ref) / ref)))
        e_ref = float(np.mean(terms))
    return MetricReport(problem.name, problem.d, solution.kind.value, e_rel, e_rmse, e_pde, e_ref,
                        time_s, 1, seed, v0, extra)


def aggregate_runs(reports, reference: float | None = None) -> dict:
    """Mean and standard deviation of each metric over runs, plus the cross-run RMSE."""
    out = {"M": len(reports)}
    for key in ("E_rel", "E_PDE", "E_ref", "V0", "time_s"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            v = np.asarray(vals, dtype=float)
            # shifting by a sample keeps the spread of identical runs exactly zero
            out[key] = (float(np.mean(v)), float(np.std(v - v[0])))
    if reference is not None:
        v0 = np.array([r.V0 for r in reports])
        out["E_RMSE"] = (float(np.sqrt(np.mean((v0 - reference) ** 2))), 0.0)
    return out


def reference_to_json(ref: ReferenceValue) -> str:
    return json.dumps(ref.to_dict(), sort_keys=True)
