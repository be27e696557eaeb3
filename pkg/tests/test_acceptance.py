"""Acceptance criteria. Each test records one PASS/FAIL line shown in the terminal summary."""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, dense_eval, random_ftt
from ttbsde import benchmarks as bm
from ttbsde import cli
from ttbsde import experiment as ex
from ttbsde.basis import PolynomialBasis
from ttbsde.diagnostics import VarianceSetup, gradient_variances, loglog_slope, variance_sweep
from ttbsde.regression import AlsConfig, RegressionProblem, als_fit, als_fit_grad, random_init
from ttbsde.sde import TimeGrid, simulate
from ttbsde.solver import ALL_KINDS, LossKind, SolverConfig, assemble_targets, solve_step

DOUBLE_WELL_PUBLISHED = 34.2687


def record(label: str, ok: bool, detail: str) -> None:
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_evaluation_matches_dense_sum():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        d, m, r = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 4)
        f = random_ftt(rng, d, m, r)
        x = rng.uniform(-1.5, 1.5, (5, d))
        ref = dense_eval(f, x)
        worst = max(worst, float(np.max(np.abs(f(x) - ref)) / np.max(np.abs(ref))))
    elapsed = time.perf_counter() - start
    record("1", worst <= 1e-12 and elapsed < 10, f"max rel err {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 10s)")


def test_criterion_2_gradients():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    fd_err = naive_err = 0.0
    h = 1e-5
    for _ in range(100):
        d, m, r = rng.integers(1, 6), rng.integers(2, 5), rng.integers(1, 4)
        f = random_ftt(rng, d, m, r)
        x = rng.uniform(-1, 1, (3, d))
        g = f.grad(x)
        scale = np.abs(g).max()
        naive_err = max(naive_err, float(np.abs(g - f.grad_naive(x)).max() / scale))
        fd = np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(d)], axis=1)
        fd_err = max(fd_err, float(np.abs(g - fd).max() / scale))
    elapsed = time.perf_counter() - start
    ok = fd_err <= 1e-6 and naive_err <= 1e-12 and elapsed < 30
    record("2", ok, f"vs FD {fd_err:.2e} (<= 1e-6), vs naive {naive_err:.2e} (<= 1e-12), {elapsed:.2f}s")


def _r_squared(x, y):
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    return 1.0 - resid @ resid / np.sum((y - y.mean()) ** 2)


def test_criterion_3_linear_cost_in_dimension():
    rng = np.random.default_rng(3)
    dims = np.array([10, 50, 100])
    fs = [random_ftt(rng, int(d), 4, 3) for d in dims]
    xs = [rng.uniform(-1, 1, (2000, d)) for d in dims]
    t_eval, t_grad = np.full(3, np.inf), np.full(3, np.inf)
    # interleave dimensions so machine-speed drift hits all of them alike; keep the best time
    for _ in range(15):
        for i, (f, x) in enumerate(zip(fs, xs)):
            t = time.perf_counter()
            f(x)
            t_eval[i] = min(t_eval[i], time.perf_counter() - t)
            t = time.perf_counter()
            f.grad(x)
            t_grad[i] = min(t_grad[i], time.perf_counter() - t)
    r2e, r2g = _r_squared(dims, t_eval), _r_squared(dims, t_grad)
    record("3", min(r2e, r2g) >= 0.95, f"R^2 evaluate {r2e:.4f}, gradient {r2g:.4f} (>= 0.95); "
                                       f"ms {np.round(t_eval * 1e3, 2)}, {np.round(t_grad * 1e3, 2)}")


def test_criterion_4_als_micro_steps_descend():
    worst = -np.inf
    count = 0
    for seed in range(50):
        rng = np.random.default_rng(400 + seed)
        d, m, r = rng.integers(1, 5), rng.integers(2, 5), rng.integers(1, 4)
        x = rng.standard_normal((80, d))
        y = np.sin(x).sum(axis=1) + np.cos(x[:, 0] * x[:, -1]) + 0.1 * rng.standard_normal(80)
        basis = PolynomialBasis.from_samples(m - 1, x)
        cfg = AlsConfig(delta=1e-6, ranks=r, max_sweeps=6, sweep_tolerance=0.0)
        init = random_init(basis, r, seed)
        # both the plain and the gradient-augmented solvers, on the same problem
        fits = [als_fit(RegressionProblem(x, y), init, cfg),
                als_fit_grad(RegressionProblem(x, y, 0.3 * rng.standard_normal((80, d))), init, cfg)]
        for f in fits:
            losses = np.array(f.diagnostics["fit"].micro_losses)
            worst = max(worst, float(np.diff(losses).max(initial=-np.inf)))
            count += len(losses)
    record("4", worst <= 1e-12, f"largest micro-step increase {worst:.2e} (<= 1e-12) over {count} steps")


def test_criterion_5_residual_variance_scaling():
    start = time.perf_counter()
    rows = variance_sweep(VarianceSetup(), (0.1, 0.01, 0.001))
    elapsed = time.perf_counter() - start
    by = {k: [r for r in rows if r["loss_kind"] == k] for k in {r["loss_kind"] for r in rows}}
    bsde = by[LossKind.BSDE_EXPLICIT.value]
    slope = loglog_slope([r["dt"] for r in bsde], [r["residual_variance"] for r in bsde])
    proj = by[LossKind.PROJ_EXPLICIT.value]
    ratios = [r["residual_variance"] / r["oracle"] for r in proj]
    oracle_min = min(r["oracle"] for r in proj)
    ok = slope >= 1 and all(0.75 <= q <= 1.25 for q in ratios) and oracle_min > 0 and elapsed < 120
    record("5", ok, f"BsdeExplicit slope {slope:.3f} (>= 1), ProjExplicit/oracle "
                    f"{', '.join(f'{q:.3f}' for q in ratios)} (within 0.75-1.25), "
                    f"min oracle {oracle_min:.3g}, {elapsed:.1f}s")


def test_criterion_6_gradient_variance():
    start = time.perf_counter()
    setup = VarianceSetup(K=10_000)
    out = gradient_variances(setup, 1e-3)
    elapsed = time.perf_counter() - start
    proj = out[LossKind.PROJ_EXPLICIT.value]
    ratio = max(out[k.value] for k in (LossKind.BSDE_EXPLICIT, LossKind.BSDE_IMPLICIT)) / proj
    record("6", ratio <= 1e-2 and elapsed < 120,
           f"BSDE/proj gradient variance {ratio:.2e} (<= 1e-2), proj {proj:.4f} "
           f"vs oracle {out['proj_oracle']:.4f}, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_7_double_well_reference():
    cfg = ex.load_config("doublewell20.json")
    start = time.perf_counter()
    ref = ex.compute_reference(cfg.problem, 10**7, 12345)
    elapsed = time.perf_counter() - start
    frozen = ex.frozen_references()[ex.reference_key(cfg.problem)]
    assert ref["value"] == frozen["value"]
    rel = abs(ref["value"] - DOUBLE_WELL_PUBLISHED) / DOUBLE_WELL_PUBLISHED
    record("7", rel <= 1e-2 and elapsed < 900,
           f"V = {ref['value']:.4f} +- {ref['stderr']:.4f} vs {DOUBLE_WELL_PUBLISHED}, "
           f"rel {rel:.4f} (<= 0.01), {elapsed:.0f}s (< 900s)")


@pytest.mark.slow
def test_criterion_8a_hjb_relative_error():
    cfg = ex.load_config("hjb100.json")
    cfg = replace(cfg, problem={**cfg.problem, "d": 10})
    ref = bm.hjb_reference(np.zeros(10), 0.0, 1.0, 10**6, 12345).value
    res = ex.run_experiment(cfg, reference=ref, resolve=False)
    errs = {r.loss_kind: r.E_rel for r in res.reports}
    ok = not res.failures and len(errs) == 3 and max(errs.values()) <= 5e-2
    record("8a", ok, f"E_rel {', '.join(f'{k} {v:.2e}' for k, v in errs.items())} (<= 5e-2), ref {ref:.4f}")


def _pde_losses(cfg):
    res = ex.run_experiment(cfg, resolve=False)
    return res, {r.loss_kind: r.E_PDE for r in res.reports}


@pytest.mark.slow
def test_criterion_8b_double_well_pde_loss():
    res, pde = _pde_losses(ex.load_config("doublewell20.json"))
    proj = pde.get("proj_explicit", np.nan)
    ok = not res.failures and all(pde.get(k, np.inf) < proj for k in ("bsde_explicit", "bsde_implicit"))
    record("8b", ok, "E_PDE " + ", ".join(f"{k} {v:.4e}" for k, v in pde.items()))


@pytest.mark.slow
def test_criterion_8c_cir_pde_loss():
    res, pde = _pde_losses(ex.load_config("cir100.json"))
    proj = pde.get("proj_explicit", np.nan)
    finite = len(pde) == 3 and all(np.isfinite(v) for v in pde.values())
    ok = not res.failures and finite and all(pde[k] < proj for k in ("bsde_explicit", "bsde_implicit"))
    record("8c", ok, "E_PDE " + ", ".join(f"{k} {v:.4e}" for k, v in pde.items()))


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["run", "hjb100.json", "--runs", "3", "--seed", "7", "--out", str(o)]) for o in outs]
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
               for n in ("runs.csv", "summary.csv"))
    record("9", codes == [0, 0] and same, f"exit codes {codes}, CSVs byte-identical: {same}")


def test_criterion_10_degenerate_first_step():
    problem = bm.hjb_log_problem(4, 1.0, x0=0.2)
    paths = simulate(problem, TimeGrid(10, 1.0), 500, seed=5)
    cfg = SolverConfig(degree=2, als=AlsConfig(ranks=2, delta=1e-6))
    V1, _ = solve_step(LossKind.PROJ_EXPLICIT, 1, problem.terminal, paths, problem, cfg)
    gaps, finite = {}, True
    for kind in ALL_KINDS:
        f, _ = solve_step(kind, 0, V1, paths, problem, cfg)
        tg = assemble_targets(kind, 0, V1, f, paths, problem)
        finite &= all(np.all(np.isfinite(u)) for u in f.tt.components)
        y = tg.y if tg.xi is None else tg.y - np.einsum("kd,kd->k", f.grad(paths.states[0]), tg.xi)
        gaps[kind.value] = abs(float(f(problem.x0[None])[0]) - float(y.mean()))
    ok = finite and max(gaps.values()) <= 1e-4
    record("10", ok, f"finite {finite}, |V0 - mean| " + ", ".join(f"{k} {v:.2e}" for k, v in gaps.items())
           + " (<= 1e-4)")
