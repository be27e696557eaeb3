import json

import numpy as np
import pytest

from conftest import additive_ftt, random_ftt
from ttbsde import benchmarks as bm
from ttbsde import experiment as ex
from ttbsde.functions import Affine, Constant
from ttbsde.sde import TimeGrid, simulate
from ttbsde.solver import BackwardSolution, LossKind


# -- HJB reference ------------------------------------------------------------------


def test_hjb_reference_terminal_and_constant():
    x = np.full(3, 0.4)
    r = bm.hjb_reference(x, 1.0, T=1.0, M=100)
    assert r.value == pytest.approx(float(bm.LogQuadratic()(x[None])[0])) and r.stderr == 0.0
    c = bm.hjb_reference(x, 0.2, T=1.0, M=1000, terminal=Constant(2.5))
    assert c.value == pytest.approx(2.5, abs=1e-14) and c.stderr == pytest.approx(0.0, abs=1e-14)


def test_hjb_reference_frozen_d10():
    block = {"id": "hjb_log", "d": 10, "T": 1.0, "x0": 0.0}
    frozen = ex.frozen_references()[ex.reference_key(block)]
    r = bm.hjb_reference(np.zeros(10), 0.0, 1.0, frozen["M"], frozen["seed"])
    assert r.value == frozen["value"]
    assert r.stderr == pytest.approx(frozen["stderr"], rel=1e-12)


def test_hjb_reference_against_closed_form():
    # for g = a |x|^2 the expectation is Gaussian: V = d/2 log(1 + 4 a s) + a |x|^2 / (1 + 4 a s)
    from ttbsde.functions import SeparableQuadratic

    a, d, s = 0.3, 4, 0.5
    g = SeparableQuadratic(np.full(d, a), np.zeros(d))
    x = np.full(d, 0.2)
    r = bm.hjb_reference(x, 1.0 - s, 1.0, 10**5, 1, terminal=g)
    exact = 0.5 * d * np.log(1 + 4 * a * s) + a * x @ x / (1 + 4 * a * s)
    assert abs(r.value - exact) <= 4 * r.stderr


def test_hjb_standard_error_scaling():
    Ms = [10**3, 10**4, 10**5, 10**6]
    ses = [bm.hjb_reference(np.zeros(5), 0.0, 1.0, M, 3).stderr for M in Ms]
    slope = np.polyfit(np.log(Ms), np.log(ses), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_log_sum_exp_guards_overflow():
    big = bm._log_mean_exp_neg([np.array([-800.0, -801.0])])
    assert np.isfinite(big[0])
    assert big[0] == pytest.approx(-800.0 - np.log((1 + np.exp(1.0)) / 2), rel=1e-12)


# -- double well ---------------------------------------------------------------------


def test_coupling_matrix_is_positive_definite():
    C = bm.coupling_matrix(20, 0, 0.1)
    assert np.linalg.eigvalsh(0.5 * (C + C.T))[0] > 0
    np.testing.assert_array_equal(C, bm.coupling_matrix(20, 0, 0.1))


def test_double_well_drift_is_potential_gradient(rng):
    C = bm.coupling_matrix(4, 1)
    drift = bm.DoubleWellDrift(C)
    x = rng.standard_normal((3, 4))
    h = 1e-6
    fd = np.stack([(drift.potential(x + h * e) - drift.potential(x - h * e)) / (2 * h)
                   for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(drift(x), -fd, rtol=1e-6, atol=1e-6)


def test_double_well_references_at_terminal_time():
    p = bm.double_well_problem(3, 0.1 * np.eye(3), 0.05, 0.5)
    x = np.array([-1.0, 0.3, 2.0])
    g = float(p.terminal(x[None])[0])
    assert bm.double_well_reference_mc(x, 0.5, p, M=10).value == g
    assert bm.double_well_reference_factorized(x, 0.5, p).value == pytest.approx(g, rel=1e-6)


def test_zero_terminal_gives_zero():
    p = bm.double_well_problem(2, 0.1 * np.eye(2), 0.0, 0.5)
    # psi = exp(-V) stays 1 up to accumulated roundoff of the time stepping
    assert bm.double_well_reference_factorized(p.x0, 0.0, p).value == pytest.approx(0.0, abs=1e-10)


def test_factorized_requires_diagonal_coupling():
    p = bm.double_well_problem(3, bm.coupling_matrix(3, 0), 0.05, 0.5)
    with pytest.raises(ValueError):
        bm.double_well_reference_factorized(p.x0, 0.0, p)


def test_one_dimensional_mc_matches_finite_differences():
    p = bm.double_well_problem(1, 0.1 * np.eye(1), 0.05, 0.5)
    fd = bm.double_well_reference_factorized(p.x0, 0.0, p)
    mc = bm.double_well_reference_mc(p.x0, 0.0, p, M=2 * 10**5, seed=2, inner_dt=0.01)
    assert abs(mc.value / fd.value - 1) <= 5e-3
    assert fd.refinement_change < 1e-5


def test_factorized_reference_matches_d_dimensional_mc():
    # frozen factorized constant vs the MC oracle on the same configuration
    cfg = ex.load_config("doublewell50.json")
    frozen = ex.frozen_references()[ex.reference_key(cfg.problem)]
    p = ex.build_problem(cfg.problem)
    fd = bm.double_well_reference_factorized(p.x0, 0.0, p)
    assert fd.value == pytest.approx(frozen["value"], rel=1e-12)
    mc = bm.double_well_reference_mc(p.x0, 0.0, p, M=2 * 10**4, seed=5, extrapolate=True)
    assert abs(mc.value - fd.value) <= 4 * mc.stderr + fd.refinement_change + 1e-3 * fd.value


# -- CIR -------------------------------------------------------------------------------


def test_cir_parameters_in_unit_interval():
    p = bm.cir_problem(10, seed=3)
    for arr in (p.parameters.a, p.parameters.b, p.parameters.gamma):
        assert np.all((arr >= 0) & (arr <= 1))
    assert isinstance(p.terminal, Constant) and p.terminal.value == 1.0


@pytest.mark.parametrize("variant", ["rank_one", "diagonal"])
def test_cir_operator_spot_checks(rng, variant):
    d = 4
    eps = 1e-6
    p = bm.cir_problem(d, seed=1, eps=eps, diffusion=variant)
    a, b, gam = p.parameters.a, p.parameters.b, p.parameters.gamma
    f = random_ftt(rng, d, 3, 2)
    x = rng.uniform(0.2, 1.5, (3, d))
    h = 1e-4
    hess = np.empty((3, d, d))
    for i, ei in enumerate(np.eye(d)):
        for j, ej in enumerate(np.eye(d)):
            hess[:, i, j] = (f(x + h * ei + h * ej) - f(x + h * ei - h * ej)
                             - f(x - h * ei + h * ej) + f(x - h * ei - h * ej)) / (4 * h * h)
    root = gam * np.sqrt(x)
    if variant == "rank_one":
        cov = np.einsum("ki,kj->kij", root, root) + eps**2 * np.eye(d)
    else:
        cov = np.einsum("ki,ij->kij", root**2, np.eye(d))
    expect = np.einsum("kd,kd->k", a * (b - x), f.grad(x)) + 0.5 * np.einsum("kij,kij->k", cov, hess)
    np.testing.assert_allclose(p.generator(f, x, 0.3), expect, rtol=1e-5, atol=1e-6)
    y = rng.standard_normal(3)
    np.testing.assert_array_equal(p.h(x, 0.3, y, None), -np.max(x, axis=1) * y)
    assert p.is_nondegenerate(x[0])


def test_cir_clamp_is_counted():
    p = bm.cir_problem(3, seed=0, diffusion="diagonal")
    p.diffusion.apply(np.array([[-0.1, 0.5, -0.2]]), 0.0, np.ones((1, 3)))
    assert p.counters["clamped"] == 2
    with pytest.raises(ValueError):
        bm.cir_problem(3, diffusion="full")


# -- metrics -----------------------------------------------------------------------------


def _exact_affine_solution(d=2, N=4, K=50):
    p = bm.heat_problem(Affine(np.ones(d)), d, 1.0, 0.5)
    grid = TimeGrid(N, 1.0)
    paths = simulate(p, grid, K, seed=0)
    f = additive_ftt(d, 1)
    sol = BackwardSolution([f] * N, p.terminal, grid, LossKind.BSDE_EXPLICIT, [], p.name)
    return sol, paths, p


def test_exact_solution_has_zero_errors():
    sol, paths, p = _exact_affine_solution()
    rep = bm.compute_metrics(sol, paths, p, reference=1.0, reference_fn=lambda x, t: x.sum(axis=1))
    assert rep.E_rel == 0.0 and rep.E_RMSE == 0.0 and rep.E_ref == 0.0
    assert rep.E_PDE <= 1e-8


def test_single_run_rmse_is_absolute_error():
    sol, paths, p = _exact_affine_solution()
    rep = bm.compute_metrics(sol, paths, p, reference=1.25)
    assert rep.E_RMSE == pytest.approx(0.25) and rep.E_rel == pytest.approx(0.2)
    agg = bm.aggregate_runs([rep], 1.25)
    assert agg["E_RMSE"][0] == pytest.approx(rep.E_RMSE)


def test_zero_reference_reports_absolute_error():
    sol, paths, p = _exact_affine_solution()
    rep = bm.compute_metrics(sol, paths, p, reference=0.0)
    assert rep.E_rel == pytest.approx(1.0) and rep.extra["E_rel_absolute"]


def test_pde_residual_detects_wrong_time_dependence():
    sol, paths, p = _exact_affine_solution()
    shifted = [f.replace(c_extra=0.0) for f in sol.functions]
    sol2 = BackwardSolution(shifted, Constant(0.0), sol.grid, sol.kind, [], p.name)
    res = bm.pde_residuals(sol2, paths, p, sol.grid.N)
    assert np.all(np.abs(res) > 0)


def test_report_serialization_roundtrip():
    r = bm.MetricReport("hjb_log", 10, "bsde_explicit", 0.01, 0.02, 0.5, None, 1.5, 1, 3)
    text = bm.reports_to_csv([r])
    assert text.splitlines()[0] == ",".join(bm.CSV_COLUMNS)
    back = bm.reports_from_csv(text)[0]
    assert back.time_s is None
    assert (back.E_rel, back.E_RMSE, back.E_PDE, back.E_ref) == (0.01, 0.02, 0.5, None)
    timed = bm.reports_from_csv(bm.reports_to_csv([r], with_time=True))[0]
    assert timed.time_s == 1.5
    assert bm.MetricReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r
