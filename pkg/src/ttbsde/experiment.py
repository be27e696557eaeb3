"""Experiment configs, batch runs over seeds and loss kinds, and report emission."""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import benchmarks as bm
from .functions import Affine, SeparableQuadratic
from .regression import AlsConfig
from .sde import PdeProblem, TimeGrid
from .solver import ALL_KINDS, LossKind, SolverConfig, backward_solve

PRESETS = ("hjb100.json", "doublewell50.json", "doublewell20.json", "cir100.json")
SUMMARY_COLUMNS = ("problem", "d", "loss_kind", "M", "E_rel_mean", "E_rel_std", "E_RMSE",
                   "E_PDE_mean", "E_PDE_std", "E_ref_mean", "E_ref_std", "V0_mean", "V0_std")


class ConfigError(ValueError):
    pass


class ReferenceOracleError(RuntimeError):
    """A reference oracle could not produce a value."""


# -- config -----------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Parsed experiment document.

    Attributes:
        problem: Problem block (``id`` plus its parameters).
        dt: Time step.
        K: Paths per run.
        losses: Loss kinds to compare.
        solver: Per-step fit settings.
        runs: Independent runs per loss kind.
        seed: Base seed; run ``i`` uses ``seed + i``.
        reference: ``{"policy": "frozen"}``, ``{"policy": "recompute", "M": ...}`` or ``{"policy": "none"}``.
        output: Default output directory.
        source: The raw document, kept for the manifest.
    """

    problem: dict
    dt: float
    K: int
    losses: list
    solver: SolverConfig
    runs: int = 1
    seed: int = 0
    reference: dict = field(default_factory=lambda: {"policy": "frozen"})
    output: str = "results"
    source: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_step(float(self.problem.get("T", 1.0)), self.dt)


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing key {key!r} in {where}")
    return block[key]


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        problem = dict(_require(doc, "problem", "config"))
        _require(problem, "id", "problem")
        als_doc = dict(doc.get("solver", {}).get("als", {}))
        if "ranks" in als_doc and isinstance(als_doc["ranks"], list):
            als_doc["ranks"] = tuple(als_doc["ranks"])
        als = AlsConfig(**als_doc)
        solver_doc = {k: v for k, v in doc.get("solver", {}).items() if k != "als"}
        solver = SolverConfig(als=als, **solver_doc)
        losses = [LossKind.parse(k) for k in doc.get("losses", [k.value for k in ALL_KINDS])]
        cfg = ExperimentConfig(
            problem=problem,
            dt=float(_require(doc, "dt", "config")),
            K=int(_require(doc, "K", "config")),
            losses=losses,
            solver=solver,
            runs=int(doc.get("runs", 1)),
            seed=int(doc.get("seed", 0)),
            reference=dict(doc.get("reference", {"policy": "frozen"})),
            output=str(doc.get("output", "results")),
            source=copy.deepcopy(doc),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.runs < 1 or cfg.K < 1 or cfg.dt <= 0:
        raise ConfigError("runs, K and dt must be positive")
    build_problem(cfg.problem)  # validates the problem block
    return cfg


def load_config(path_or_name) -> ExperimentConfig:
    """Read a config file, falling back to the shipped presets by name."""
    path = Path(path_or_name)
    try:
        if path.exists():
            text = path.read_text()
        else:
            name = path.name if path.suffix else f"{path.name}.json"
            text = resources.files("ttbsde.presets").joinpath(name).read_text()
    except (FileNotFoundError, OSError) as exc:
        raise ConfigError(f"cannot read config {path_or_name!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path_or_name!r}: {exc}") from exc
    return parse_config(doc)


def build_problem(block: dict) -> PdeProblem:
    pid = block["id"]
    d = int(block.get("d", 1))
    T = float(block.get("T", 1.0))
    if pid == "hjb_log":
        return bm.hjb_log_problem(d, T, block.get("x0", 0.0))
    if pid == "double_well":
        coupling = block.get("coupling", {"kind": "diagonal", "scale": 0.1})
        if coupling["kind"] == "diagonal":
            C = float(coupling.get("scale", 0.1)) * np.eye(d)
        elif coupling["kind"] == "random":
            C = bm.coupling_matrix(d, int(coupling.get("seed", 0)), float(coupling.get("std", 0.1)))
        else:
            raise ConfigError(f"unknown coupling kind {coupling['kind']!r}")
        return bm.double_well_problem(d, C, block.get("nu", 0.05), T, block.get("x0", -1.0),
                                      float(block.get("sigma", bm.SQRT2)))
    if pid == "cir":
        return bm.cir_problem(d, int(block.get("param_seed", 0)), T, block.get("x0", 1.0),
                              block.get("diffusion", "diagonal"))
    if pid == "heat":
        term = block.get("terminal", "affine")
        if term == "affine":
            g = Affine(np.ones(d))
        elif term == "quadratic":
            g = SeparableQuadratic(np.ones(d), np.zeros(d))
        else:
            raise ConfigError(f"unknown heat terminal {term!r}")
        return bm.heat_problem(g, d, T, block.get("x0", 0.0), float(block.get("sigma", bm.SQRT2)))
    raise ConfigError(f"unknown problem id {pid!r}")


# -- references -----------------------------------------------------------------


def reference_key(block: dict) -> str:
    return json.dumps(block, sort_keys=True)


def frozen_references() -> dict:
    try:
        text = resources.files("ttbsde.data").joinpath("reference_values.json").read_text()
    except FileNotFoundError:
        return {}
    return json.loads(text)


def compute_reference(block: dict, M: int | None = None, seed: int = 12345) -> dict:
    """Reference value ``V(x_0, 0)`` for a problem block, or ``None`` when unavailable."""
    problem = build_problem(block)
    pid = block["id"]
    try:
        if pid == "hjb_log":
            r = bm.hjb_reference(problem.x0, 0.0, problem.T, M or 10**6, seed)
            return {"value": r.value, "stderr": r.stderr, "M": r.M, "seed": seed, "method": "mc"}
        if pid == "double_well":
            if block.get("coupling", {"kind": "diagonal"})["kind"] == "diagonal":
                r = bm.double_well_reference_factorized(problem.x0, 0.0, problem)
                out = r.to_dict()
                out["method"] = "fd"
                return out
            r = bm.double_well_reference_mc(problem.x0, 0.0, problem, M or 10**7, seed,
                                            inner_dt=0.01, extrapolate=True)
            return {"value": r.value, "stderr": r.stderr, "M": r.M, "seed": seed,
                    "method": "mc_richardson", "inner_dt": 0.01}
        if pid == "heat":
            x0 = problem.x0
            value = float(problem.terminal(x0[None])[0])
            if block.get("terminal", "affine") == "quadratic":
                value += problem.diffusion.scale**2 * problem.d * problem.T
            return {"value": value, "stderr": 0.0, "method": "exact"}
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        raise ReferenceOracleError(str(exc)) from exc
    return None


def resolve_reference(cfg: ExperimentConfig) -> float | None:
    policy = cfg.reference.get("policy", "frozen")
    if policy == "none":
        return None
    key = reference_key(cfg.problem)
    if policy == "frozen":
        table = frozen_references()
        if key in table:
            return table[key]["value"]
    ref = compute_reference(cfg.problem, cfg.reference.get("M"))
    return None if ref is None else ref["value"]


# -- runs -----------------------------------------------------------------------


@dataclass
class RunOutcome:
    kind: LossKind
    index: int
    seed: int
    report: bm.MetricReport | None
    error: str | None = None
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    outcomes: list
    reference: float | None

    @property
    def reports(self) -> list:
        return [o.report for o in self.outcomes if o.report is not None]

    @property
    def failures(self) -> list:
        return [o for o in self.outcomes if o.error is not None]

    def summaries(self) -> list:
        rows = []
        for kind in self.config.losses:
            reps = [o.report for o in self.outcomes if o.kind is kind and o.report is not None]
            if not reps:
                continue
            agg = bm.aggregate_runs(reps, self.reference)
            rows.append({"problem": reps[0].problem, "d": reps[0].d, "loss_kind": kind.value, **agg})
        return rows


def _one_run(cfg: ExperimentConfig, problem: PdeProblem, kind: LossKind, index: int,
             reference: float | None, solutions_dir: Path | None) -> RunOutcome:
    seed = cfg.seed + index
    start = time.perf_counter()
    try:
        sol, paths = backward_solve(kind, problem, cfg.grid, cfg.K, seed, cfg.solver)
        elapsed = time.perf_counter() - start
        report = bm.compute_metrics(sol, paths, problem, reference, seed=seed, time_s=elapsed)
        if solutions_dir is not None:
            sol.save(solutions_dir / f"{kind.value}_run{index:03d}")
        return RunOutcome(kind, index, seed, report, None, elapsed)
    except Exception as exc:  # recorded per run; aggregation continues over successes
        return RunOutcome(kind, index, seed, None, f"{type(exc).__name__}: {exc}",
                          time.perf_counter() - start)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, save_solutions: Path | None = None,
                   reference: float | None = None, resolve: bool = True) -> ExperimentResult:
    """Run every (loss kind, run index) pair; results are ordered by kind then run."""
    if reference is None and resolve:
        reference = resolve_reference(cfg)
    tasks = [(kind, i) for kind in cfg.losses for i in range(cfg.runs)]
    # problems carry mutable event counters, so each task gets its own instance
    def job(task):
        kind, i = task
        return _one_run(cfg, build_problem(cfg.problem), kind, i, reference,
                        None if save_solutions is None else Path(save_solutions))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(job, tasks))
    else:
        outcomes = [job(t) for t in tasks]
    return ExperimentResult(cfg, outcomes, reference)


# -- reports ----------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        cells = []
        for col in SUMMARY_COLUMNS:
            if col.endswith("_mean") or col.endswith("_std"):
                key, which = col.rsplit("_", 1)
                pair = r.get(key)
                cells.append(_fmt(None if pair is None else pair[0 if which == "mean" else 1]))
            elif col == "E_RMSE":
                pair = r.get("E_RMSE")
                cells.append(_fmt(None if pair is None else pair[0]))
            else:
                cells.append(_fmt(r.get(col)))
        w.writerow(cells)
    return buf.getvalue()


def markdown_table(rows) -> str:
    """Loss kind by metric, ``mean +/- std``."""
    metrics = ("E_rel", "E_RMSE", "E_PDE", "E_ref", "V0")
    lines = ["| loss | " + " | ".join(metrics) + " |", "|---" * (len(metrics) + 1) + "|"]
    for r in rows:
        cells = []
        for m in metrics:
            pair = r.get(m)
            if pair is None:
                cells.append("-")
            elif m == "E_RMSE":
                cells.append(f"{pair[0]:.4e}")
            else:
                cells.append(f"{pair[0]:.4e} ± {pair[1]:.2e}")
        lines.append(f"| {r['loss_kind']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(result: ExperimentResult, out_dir, with_times: bool = False) -> dict:
    """Write ``runs.csv``, ``summary.csv``, ``report.json``, ``report.md`` and ``timings.log``.

    Everything except ``timings.log`` is a deterministic function of the
    config and seeds unless ``with_times`` is set.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        reports = result.reports
        paths["runs"] = out / "runs.csv"
        paths["runs"].write_text(bm.reports_to_csv(reports, with_times))
        rows = result.summaries()
        paths["summary"] = out / "summary.csv"
        paths["summary"].write_text(summary_csv(rows))
        doc = {
            "reference": result.reference,
            "runs": [_report_json(r, with_times) for r in reports],
            "summary": rows if with_times else [{k: v for k, v in r.items() if k != "time_s"}
                                                 for r in rows],
            "failures": [{"loss_kind": f.kind.value, "run": f.index, "seed": f.seed, "error": f.error}
                         for f in result.failures],
        }
        paths["json"] = out / "report.json"
        paths["json"].write_text(json.dumps(doc, indent=2, sort_keys=True))
        paths["markdown"] = out / "report.md"
        paths["markdown"].write_text(markdown_table(rows))
        paths["timings"] = out / "timings.log"
        paths["timings"].write_text("".join(
            f"{o.kind.value}\trun={o.index}\tseed={o.seed}\t{o.wall_time:.3f}s\n"
            for o in result.outcomes))
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def _report_json(r: bm.MetricReport, with_times: bool) -> dict:
    d = r.to_dict()
    if not with_times:
        d["time_s"] = None
    return d
