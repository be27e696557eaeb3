"""Regularized least squares and ALS sweeps over functional tensor trains.

The objective for samples ``x_k``, targets ``y_k`` and optional directions
``xi_k`` is::

    J(V) = 1/K sum_k (V(x_k) + grad V(x_k) . xi_k - y_k)^2 + delta |c|^2

where ``|c|`` is the Frobenius norm of the TT coefficients (plus ``c_g`` when
the terminal function is part of the model).  With all non-core components
orthogonal that norm equals the norm of the core, so every ALS micro-step is
an exact ridge regression on a linear space containing the current iterate
and ``J`` never increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import PolynomialBasis
from .functional import FunctionalTT, left_step, right_step
from .functions import SmoothFunction
from .tensor import TensorTrain, _left_qr, _right_qr, feasible_ranks, move_core, truncate

EIG_CLIP = 1e-14
COND_SWITCH = 1e10


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations are singular and no regularization was requested."""


@dataclass
class RegressionProblem:
    x: np.ndarray
    y: np.ndarray
    xi: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.x.shape[0] < 1 or self.x.shape[0] != self.y.size:
            raise ValueError("need K >= 1 samples with one target each")
        if self.xi is not None:
            self.xi = np.asarray(self.xi, dtype=float)
            if self.xi.shape != self.x.shape:
                raise ValueError("directions must have the same shape as the samples")

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def has_directions(self) -> bool:
        return self.xi is not None and bool(np.any(self.xi))


@dataclass
class AlsConfig:
    """ALS settings.

    Attributes:
        delta: Ridge weight on the squared coefficient norm.
        max_sweeps: Upper bound on full sweeps.
        sweep_tolerance: Stop once a sweep lowers the loss by less than this
            relative amount.
        ranks: Fixed TT ranks (int or tuple of ``d - 1``), used unless
            ``adaptive`` is set.
        adaptive: Grow ranks from 1 while the loss keeps improving.
        max_rank: Cap for adaptive growth.
        growth_threshold: Minimal relative loss decrease that keeps a rank increase.
        validation_fraction: Share of samples held out to judge rank growth
            (0 judges growth on the training loss).
        include_terminal: Add the terminal function ``g`` as an extra model column.
        seed: Seed for random initial components and injected rank slices.
    """

    delta: float = 1e-6
    max_sweeps: int = 15
    sweep_tolerance: float = 1e-8
    ranks: int | tuple = 1
    adaptive: bool = False
    max_rank: int = 4
    growth_threshold: float = 1e-3
    validation_fraction: float = 0.2
    include_terminal: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if self.max_rank < 1:
            raise ValueError("max_rank must be at least 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if not np.isscalar(self.ranks):
            self.ranks = tuple(int(r) for r in self.ranks)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        if isinstance(out["ranks"], tuple):
            out["ranks"] = list(out["ranks"])
        return out


@dataclass
class FitRecord:
    """Structured diagnostics of one ALS run."""

    micro_losses: list = field(default_factory=list)
    sweep_losses: list = field(default_factory=list)
    ranks: tuple = ()
    condition: float = 1.0
    converged: bool = False

    @property
    def sweeps(self) -> int:
        return max(len(self.sweep_losses) - 1, 0)

    @property
    def final_loss(self) -> float:
        return self.sweep_losses[-1] if self.sweep_losses else float("nan")

    def to_dict(self) -> dict:
        return {
            "sweeps": self.sweeps,
            "sweep_losses": [float(v) for v in self.sweep_losses],
            "final_loss": float(self.final_loss),
            "ranks": list(self.ranks),
            "condition": float(self.condition),
            "converged": bool(self.converged),
        }


def solve_local(A, y, delta: float, return_condition: bool = False):
    """Ridge solution ``(A^T A + delta I)^{-1} A^T y``.

    Uses a Cholesky factorization of the normal equations and falls back to
    the SVD of ``A`` when the system is ill-conditioned.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    gram = A.T @ A
    rhs = A.T @ y
    n = gram.shape[0]
    if delta > 0:
        gram[np.diag_indices(n)] += delta
    else:
        evals = np.linalg.eigvalsh(gram)
        if evals[0] <= EIG_CLIP * max(evals[-1], np.finfo(float).tiny):
            raise SingularSystemError("normal equations are rank deficient and delta = 0")
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        diag = np.abs(np.diag(factor[0]))
        cond = float((diag.max() / diag.min()) ** 2) if diag.min() > 0 else np.inf
        if cond > COND_SWITCH:
            raise np.linalg.LinAlgError("ill-conditioned normal equations")
        c = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        # ridge through the SVD of A avoids squaring the condition number
        u, sv, vt = np.linalg.svd(A, full_matrices=False)
        keep = sv > np.sqrt(EIG_CLIP) * sv[0] if delta == 0 else sv > 0
        c = vt[keep].T @ (sv[keep] / (sv[keep] ** 2 + delta) * (u[:, keep].T @ y))
        lam = sv**2 + delta
        cond = float(lam.max() / lam[keep].min())
    return (c, cond) if return_condition else c


def random_init(basis: PolynomialBasis, ranks, seed=0, extra: SmoothFunction | None = None,
                c_extra: float = 0.0) -> FunctionalTT:
    """Seeded Gaussian components scaled by ``1/sqrt(r m)``, right-orthogonalized."""
    dims = [basis.size] * basis.dim
    tt = TensorTrain.random(dims, feasible_ranks(dims, ranks), np.random.default_rng(seed))
    return FunctionalTT(tt, basis, extra, c_extra)


# -- ALS -------------------------------------------------------------------


class _Workspace:
    """Sample-side data of one ALS run: basis values and the running stacks."""

    def __init__(self, f: FunctionalTT, problem: RegressionProblem, use_grad: bool,
                 include_terminal: bool):
        x = problem.x
        self.K = problem.size
        self.y = problem.y
        self.use_grad = use_grad
        if use_grad:
            phi, dphi = f.basis.evaluate(x, 1)
            self.dphi_xi = dphi * problem.xi[:, :, None]
        else:
            (phi,) = f.basis.evaluate(x, 0)
            self.dphi_xi = None
        self.phi = phi
        self.gcol = None
        if include_terminal:
            g = f.extra(x)
            if use_grad:
                g = g + f.extra.directional(x, problem.xi)
            self.gcol = g

    def init_stacks(self, comps):
        d = len(comps)
        K = self.K
        self.pm = [np.ones((K, 1))] + [None] * (d - 1)
        self.pp = [None] * (d - 1) + [np.ones((K, 1))]
        self.tm = [np.zeros((K, 1))] + [None] * (d - 1) if self.use_grad else None
        self.tp = [None] * (d - 1) + [np.zeros((K, 1))] if self.use_grad else None
        for l in range(d - 1, 0, -1):
            self.push_right(comps[l], l)

    def push_left(self, u, l):
        """Update the stacks left of component ``l + 1`` after fixing ``u = u_l``."""
        self.pm[l + 1] = left_step(self.pm[l], u, self.phi[:, l])
        if self.use_grad:
            self.tm[l + 1] = (left_step(self.tm[l], u, self.phi[:, l])
                              + left_step(self.pm[l], u, self.dphi_xi[:, l]))

    def push_right(self, u, l):
        """Update the stacks right of component ``l - 1`` after fixing ``u = u_l``."""
        self.pp[l - 1] = right_step(u, self.phi[:, l], self.pp[l])
        if self.use_grad:
            self.tp[l - 1] = (right_step(u, self.phi[:, l], self.tp[l])
                              + right_step(u, self.dphi_xi[:, l], self.pp[l]))

    def design(self, l):
        phi = self.phi[:, l]
        A = np.einsum("ka,ki,kb->kaib", self.pm[l], phi, self.pp[l])
        if self.use_grad:
            A = A + np.einsum("ka,ki,kb->kaib", self.tm[l], phi, self.pp[l])
            A = A + np.einsum("ka,ki,kb->kaib", self.pm[l], self.dphi_xi[:, l], self.pp[l])
            A = A + np.einsum("ka,ki,kb->kaib", self.pm[l], phi, self.tp[l])
        A = A.reshape(self.K, -1)
        if self.gcol is not None:
            A = np.concatenate([A, self.gcol[:, None]], axis=1)
        return A


def _loss(A, w, y, delta):
    r = A @ w - y
    return float(r @ r) / y.size + delta * float(w @ w)


def _als(problem: RegressionProblem, init: FunctionalTT, config: AlsConfig,
         use_grad: bool) -> FunctionalTT:
    include = config.include_terminal and init.extra is not None
    d = init.dim
    tt = move_core(init.tt, 0)
    comps = list(tt.components)
    c_g = init.c_extra if include else 0.0
    ws = _Workspace(init, problem, use_grad, include)
    ws.init_stacks(comps)
    record = FitRecord(ranks=tt.ranks)
    delta_local = config.delta * ws.K

    def current_vector(l):
        w = comps[l].reshape(-1)
        return np.append(w, c_g) if include else w

    A0 = ws.design(0)
    record.micro_losses.append(_loss(A0, current_vector(0), ws.y, config.delta))
    record.sweep_losses.append(record.micro_losses[-1])

    for sweep in range(config.max_sweeps):
        order = range(d) if sweep % 2 == 0 else range(d - 1, -1, -1)
        for l in order:
            A = A0 if (sweep == 0 and l == 0) else ws.design(l)
            w, cond = solve_local(A, ws.y, delta_local, return_condition=True)
            record.condition = max(record.condition, cond)
            record.micro_losses.append(_loss(A, w, ws.y, config.delta))
            shape = comps[l].shape
            if include:
                c_g = float(w[-1])
                w = w[:-1]
            u = w.reshape(shape)
            forward = sweep % 2 == 0
            if forward and l < d - 1:
                q, r = _left_qr(u)
                comps[l] = q
                comps[l + 1] = np.einsum("ab,bmc->amc", r, comps[l + 1])
                ws.push_left(q, l)
            elif not forward and l > 0:
                q, r = _right_qr(u)
                comps[l] = q
                comps[l - 1] = np.einsum("amb,bc->amc", comps[l - 1], r)
                ws.push_right(q, l)
            else:
                comps[l] = u
        prev = record.sweep_losses[-1]
        cur = record.micro_losses[-1]
        record.sweep_losses.append(cur)
        if prev - cur <= config.sweep_tolerance * max(abs(prev), np.finfo(float).tiny):
            record.converged = True
            break

    core = d - 1 if (len(record.sweep_losses) - 1) % 2 == 1 else 0
    out = FunctionalTT(TensorTrain(tuple(comps), core), init.basis, init.extra,
                       c_g if include else init.c_extra)
    out.diagnostics["fit"] = record
    return out


def als_fit(problem: RegressionProblem, init: FunctionalTT, config: AlsConfig) -> FunctionalTT:
    """ALS for ``1/K sum (V(x_k) - y_k)^2 + delta |c|^2``."""
    return _als(RegressionProblem(problem.x, problem.y), init, config, use_grad=False)


def als_fit_grad(problem: RegressionProblem, init: FunctionalTT, config: AlsConfig) -> FunctionalTT:
    """ALS for ``1/K sum (V(x_k) + grad V(x_k) . xi_k - y_k)^2 + delta |c|^2``.

    Reduces to :func:`als_fit` when every direction is zero.
    """
    if not problem.has_directions:
        return als_fit(problem, init, config)
    return _als(problem, init, config, use_grad=True)


def _grow(tt: TensorTrain, caps, rng) -> TensorTrain | None:
    """Add one bond dimension wherever allowed; the represented tensor is unchanged.

    The new left slice is random with scale ``1e-3 |u_l|``, the matching right
    slice is zero, so the function and loss are preserved exactly.
    """
    comps = list(tt.components)
    ranks = tt.ranks
    grown = False
    for l in range(tt.order - 1):
        if ranks[l] >= caps[l]:
            continue
        u, v = comps[l], comps[l + 1]
        scale = 1e-3 * max(np.linalg.norm(u), 1e-300) / np.sqrt(u.shape[0] * u.shape[1])
        new = rng.standard_normal((u.shape[0], u.shape[1], 1)) * scale
        comps[l] = np.concatenate([u, new], axis=2)
        comps[l + 1] = np.concatenate([v, np.zeros((1, v.shape[1], v.shape[2]))], axis=0)
        grown = True
    if not grown:
        return None
    return move_core(TensorTrain(tuple(comps)), 0)


def _subset(problem: RegressionProblem, idx) -> RegressionProblem:
    return RegressionProblem(problem.x[idx], problem.y[idx], None if problem.xi is None else problem.xi[idx])


def _mse(f: FunctionalTT, problem: RegressionProblem) -> float:
    r = f(problem.x) - problem.y
    if problem.xi is not None:
        r = r + f.directional(problem.x, problem.xi)
    return float(np.mean(r**2))


def adapt_rank(f: FunctionalTT, problem: RegressionProblem, config: AlsConfig) -> FunctionalTT:
    """Rank-adaptive ALS starting from rank 1.

    After each converged ALS cycle every bond below ``max_rank`` grows by one.
    The growth is kept only if the loss drops by more than ``growth_threshold``
    relative to the previous cycle. With ``validation_fraction > 0`` cycles fit
    the remaining samples and the drop is measured on the held-out ones, which
    stops growth once extra ranks only fit noise; the chosen ranks are then
    refit on all samples. The result is never worse than the rank-one fit.
    """
    fit = als_fit_grad if problem.has_directions else als_fit
    rng = np.random.default_rng(config.seed + 7919)
    caps = feasible_ranks(f.tt.dims, config.max_rank)
    if any(r != 1 for r in f.tt.ranks):
        f = FunctionalTT(_rank_one_part(f.tt), f.basis, f.extra, f.c_extra)
    rank_one = fit(problem, f, config)
    n_val = int(config.validation_fraction * problem.size)
    if n_val >= 1 and problem.size - n_val >= 1:
        perm = np.random.default_rng(config.seed + 104729).permutation(problem.size)
        train, val = _subset(problem, np.sort(perm[n_val:])), _subset(problem, np.sort(perm[:n_val]))
        best = fit(train, f, config)
        score = lambda g: _mse(g, val)  # noqa: E731
    else:
        train, best = problem, rank_one
        score = lambda g: g.diagnostics["fit"].final_loss  # noqa: E731
    best_score = score(best)
    scale = float(np.mean(problem.y**2)) + np.finfo(float).tiny
    history = [(best.tt.ranks, best.diagnostics["fit"].final_loss, best_score)]
    # nothing left to explain once the score reaches round-off relative to the targets
    while best_score > 1e-14 * scale:
        grown = _grow(best.tt, caps, rng)
        if grown is None:
            break
        cand = fit(train, best.replace(tt=grown), config)
        cand_score = score(cand)
        history.append((cand.tt.ranks, cand.diagnostics["fit"].final_loss, cand_score))
        if best_score - cand_score <= config.growth_threshold * best_score:
            break
        best, best_score = cand, cand_score
    if any(r != 1 for r in best.tt.ranks):
        if train is not problem:
            best = fit(problem, best, config)
        if best.diagnostics["fit"].final_loss > rank_one.diagnostics["fit"].final_loss:
            best = rank_one
    else:
        best = rank_one
    best.diagnostics["rank_history"] = history
    return best


def _rank_one_part(tt: TensorTrain) -> TensorTrain:
    """Leading rank-one term of ``tt`` from the top singular vectors of each bond."""
    return truncate(tt, tolerance=0.0, max_rank=1)


def fit(problem: RegressionProblem, init: FunctionalTT, config: AlsConfig) -> FunctionalTT:
    """Dispatch to fixed-rank or adaptive ALS, with or without directions."""
    if config.adaptive:
        return adapt_rank(init, problem, config)
    return als_fit_grad(problem, init, config)
