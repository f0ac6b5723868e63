"""Experiment orchestration: disorder averages, theory columns, structured output.

Each experiment is described by an :class:`ExperimentSpec`.  Instance ``i`` at
size ``N`` draws its disorder from ``derive_stream(seed, "instance/<kind>/N=<N>", i)``
and its Monte Carlo randomness from ``derive_stream(seed, "walk/N=<N>", i)``
(volume) or from per-chain streams of the instance seed (Gibbs).  Nothing
depends on execution order, so results are identical for any worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from . import __version__
from .gibbs import (
    ChainFault,
    estimate_order_parameters,
    make_instance,
    pattern_count,
    rs_consistency_report,
)
from .replica import (
    DivergingMinimumError,
    ModelParams,
    SaddleNonConvergence,
    capacity_curve,
    critical_capacity,
    gardner_free_energy,
    solve_saddle,
    spherical_value,
)
from .streams import RNG_ALGORITHM, derive_stream, generator
from .volume import WalkConfig, estimate_log_theta, make_volume_instance

COMMANDS = ("capacity", "free-energy", "saddle", "simulate-volume", "simulate-gibbs", "factorization", "consistency")

STREAM_MAP = {
    "volume instance": "derive_stream(seed, 'instance/volume/N=<N>', i) -> patterns via (s, 'pattern', 0)",
    "volume walk": "derive_stream(seed, 'walk/N=<N>', i)",
    "gibbs instance": "derive_stream(seed, 'instance/gibbs/N=<N>', i) -> patterns (s,'pattern',0), field (s,'field',0)",
    "gibbs chain c": "derive_stream(instance_seed, 'chain', c)",
}


@dataclass
class ExperimentSpec:
    command: str
    params: dict = field(default_factory=dict)
    N_list: list = field(default_factory=list)
    n_instances: int = 30
    seed: int = 0
    M: float = 10.0
    output_path: str | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.format not in ("csv", "json"):
            raise ValueError(f"format must be csv or json, got {self.format!r}")
        if self.n_instances < 1:
            raise ValueError("n_instances must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not self.M > 0:
            raise ValueError("M must be positive")
        if any(int(n) < 2 for n in self.N_list):
            raise ValueError("every N must be >= 2")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class ResultRecord:
    spec: dict
    results: list
    meta: dict
    columns: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec, "results": self.results, "meta": self.meta}, indent=2, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns or (list(self.results[0]) if self.results else [])
        writer.writerow(cols)
        for row in self.results:
            writer.writerow([_fmt(row.get(c)) for c in cols])
        return buf.getvalue()

    def stochastic_scalars(self) -> list:
        return [json.dumps(r, sort_keys=True) for r in self.results]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def _meta(start: float, streams: dict | None = None) -> dict:
    return {
        "version": __version__,
        "rng": RNG_ALGORITHM,
        "streams": streams or {},
        "wallclock": time.time() - start,
    }


def _pmap(fn: Callable, tasks: list, workers: int) -> list:
    """Map in a process pool when workers > 1; output order follows ``tasks``."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _loglog_slope(x: Iterable[float], y: Iterable[float]) -> float:
    x, y = np.log(np.asarray(list(x), float)), np.log(np.asarray(list(y), float))
    if x.size < 2 or not np.all(np.isfinite(y)):
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


# --- theory ------------------------------------------------------------------

CAPACITY_COLUMNS = ["k", "alpha_c"]


def run_capacity_scan(k_grid) -> tuple:
    curve = capacity_curve(k_grid)
    ac = curve.alpha_c
    if ac.size > 1 and not np.all(np.diff(ac) < 0):
        raise AssertionError("capacity curve is not strictly decreasing")
    rows = [{"k": float(k), "alpha_c": float(a)} for k, a in curve.entries]
    return curve, rows


def theory_columns(eps_list) -> list:
    cols = ["alpha", "k", "q_star", "F", "diverging"]
    for e in eps_list:
        cols += [f"spherical_eps={e!r}", f"z_min_eps={e!r}"]
    return cols


def run_theory_table(alpha_grid, k: float, eps_list=()) -> list:
    rows = []
    ac = critical_capacity(k)
    for alpha in alpha_grid:
        row: dict[str, Any] = {"alpha": float(alpha), "k": float(k)}
        try:
            value, q = gardner_free_energy(alpha, k)
            row.update(q_star=q, F=value, diverging=False)
        except DivergingMinimumError:
            row.update(q_star=math.nan, F=-math.inf, diverging=True)
        for e in eps_list:
            if alpha < ac and alpha < 2:
                sv, z = spherical_value(alpha, k, e)
            else:
                sv, z = -math.inf, math.nan
            row[f"spherical_eps={e!r}"] = sv
            row[f"z_min_eps={e!r}"] = z
        rows.append(row)
    return rows


SADDLE_COLUMNS = ["alpha", "k", "h", "z", "eps", "q", "R", "s", "residual_f1", "residual_f2", "iterations", "converged", "boundary_pinned"]


def run_saddle(params: ModelParams) -> list:
    sp = solve_saddle(params)
    return [{
        "alpha": params.alpha, "k": params.k, "h": params.h, "z": params.z, "eps": params.eps,
        "q": sp.q, "R": sp.R, "s": sp.s, "residual_f1": sp.residual_f1, "residual_f2": sp.residual_f2,
        "iterations": sp.iterations, "converged": sp.converged, "boundary_pinned": sp.boundary_pinned,
    }]


# --- volume ------------------------------------------------------------------

VOLUME_COLUMNS = [
    "N", "p", "alpha", "k", "M", "n_instances", "n_failed", "mean", "variance", "stderr_mean",
    "clipped_fraction", "F", "gap",
]


def _walk_config(params: dict) -> WalkConfig:
    return WalkConfig(
        steps_between_samples=params.get("steps"),
        samples_per_level=int(params.get("samples", 1000)),
        warmup_steps=params.get("warmup"),
        n_walkers=int(params.get("walkers", 100)),
    )


def _volume_task(task: tuple) -> dict:
    N, i, alpha, k, M, seed, cfg, mode = task
    inst_seed = derive_stream(seed, f"instance/volume/N={N}", i)
    try:
        inst = make_volume_instance(N, alpha, k, inst_seed, mode)
        est = estimate_log_theta(inst, M, cfg, generator(derive_stream(seed, f"walk/N={N}", i)))
        return {"N": N, "instance": i, "total": est.total, "stderr": est.stderr, "clipped": est.clipped, "error": ""}
    except (ArithmeticError, ValueError) as exc:
        return {"N": N, "instance": i, "total": math.nan, "stderr": math.nan, "clipped": False, "error": repr(exc)}


def run_volume_experiment(spec: ExperimentSpec, workers: int = 1) -> tuple[list, list]:
    """Per-N disorder mean and variance of (1/N) log Theta (clipped at -M), with the replica column."""
    p = spec.params
    alpha, k = float(p["alpha"]), float(p.get("k", 0.0))
    cfg = _walk_config(p)
    mode = p.get("mode", "binary")
    tasks = [(int(N), i, alpha, k, spec.M, spec.seed, cfg, mode) for N in spec.N_list for i in range(spec.n_instances)]
    per_instance = sorted(_pmap(_volume_task, tasks, workers), key=lambda r: (r["N"], r["instance"]))
    try:
        F = gardner_free_energy(alpha, k)[0]
    except DivergingMinimumError:
        F = -math.inf
    rows = []
    for N in spec.N_list:
        sub = [r for r in per_instance if r["N"] == int(N) and not r["error"]]
        vals = np.array([r["total"] for r in sub])
        n = vals.size
        mean = float(vals.mean()) if n else math.nan
        var = float(vals.var(ddof=1)) if n > 1 else math.nan
        rows.append({
            "N": int(N), "p": pattern_count(int(N), alpha), "alpha": alpha, "k": k, "M": spec.M,
            "n_instances": n, "n_failed": spec.n_instances - n, "mean": mean, "variance": var,
            "stderr_mean": math.sqrt(var / n) if n > 1 else math.nan,
            "clipped_fraction": float(np.mean([r["clipped"] for r in sub])) if n else math.nan,
            "F": F, "gap": abs(mean - F) if math.isfinite(F) else math.inf,
        })
    return rows, per_instance


# --- gibbs -------------------------------------------------------------------

GIBBS_COLUMNS = [
    "N", "p", "alpha", "k", "h", "z", "eps", "n_instances", "n_failed",
    "q_N", "q_N_se", "R_N", "R_N_se", "tilde_q", "tilde_U", "factorization", "factorization_se",
    "q_star", "R_star", "q_gap", "R_gap", "q_identity_dev", "R_minus_q_identity_dev", "n_flagged", "max_abs_J_over_sqrt_n",
]


def _gibbs_task(task: tuple) -> dict:
    N, i, params, seed, chains, sweeps, burn_in, mode, saddle = task
    inst_seed = derive_stream(seed, f"instance/gibbs/N={N}", i)
    out: dict[str, Any] = {"N": N, "instance": i, "error": ""}
    try:
        inst = make_instance(N, params.alpha, params, inst_seed, mode)
        est = estimate_order_parameters(inst, chains, sweeps, burn_in)
        out.update(
            q_N=est.q_N.value, R_N=est.R_N.value, tilde_q=est.tilde_q.value, tilde_U=est.tilde_U.value,
            factorization=est.factorization_stat.value, factorization_se=est.factorization_stat.stderr,
            max_abs_J=est.max_abs_J_over_sqrt_n,
        )
        if saddle is not None:
            rep = rs_consistency_report(est, saddle, params)
            rows = {r.name: r for r in rep.rows}
            out.update(
                q_identity_dev=rows["q_identity"].deviation,
                R_minus_q_identity_dev=rows["R_minus_q_identity"].deviation,
                flagged=len(rep.flagged),
            )
    except (ChainFault, ArithmeticError, ValueError) as exc:
        out["error"] = repr(exc)
    return out


def _mean_se(vals) -> tuple[float, float]:
    a = np.asarray([v for v in vals if v is not None and math.isfinite(v)], float)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else math.nan


def run_gibbs_experiment(spec: ExperimentSpec, workers: int = 1) -> tuple[list, list]:
    """Per-N disorder averages of the Gibbs order parameters with live replica columns."""
    p = spec.params
    params = ModelParams(
        alpha=float(p["alpha"]), k=float(p.get("k", 0.0)), h=float(p.get("h", 0.0)),
        z=float(p.get("z", 1.0)), eps=float(p.get("eps", 0.05)),
    )
    params.check_valid_range()
    chains, sweeps, burn_in = int(p.get("chains", 4)), int(p.get("sweeps", 2000)), int(p.get("burnin", 500))
    mode = p.get("mode", "binary")
    saddle = solve_saddle(params)
    tasks = [
        (int(N), i, params, spec.seed, chains, sweeps, burn_in, mode, saddle)
        for N in spec.N_list
        for i in range(spec.n_instances)
    ]
    per_instance = sorted(_pmap(_gibbs_task, tasks, workers), key=lambda r: (r["N"], r["instance"]))
    rows = []
    for N in spec.N_list:
        sub = [r for r in per_instance if r["N"] == int(N) and not r["error"]]
        q, q_se = _mean_se(r["q_N"] for r in sub)
        R, R_se = _mean_se(r["R_N"] for r in sub)
        f, f_se = _mean_se(r["factorization"] for r in sub)
        rows.append({
            "N": int(N), "p": pattern_count(int(N), params.alpha), "alpha": params.alpha, "k": params.k,
            "h": params.h, "z": params.z, "eps": params.eps, "n_instances": len(sub),
            "n_failed": spec.n_instances - len(sub), "q_N": q, "q_N_se": q_se, "R_N": R, "R_N_se": R_se,
            "tilde_q": _mean_se(r["tilde_q"] for r in sub)[0], "tilde_U": _mean_se(r["tilde_U"] for r in sub)[0],
            "factorization": f, "factorization_se": f_se, "q_star": saddle.q, "R_star": saddle.R,
            "q_gap": abs(q - saddle.q), "R_gap": abs(R - saddle.R),
            "q_identity_dev": _mean_se(r.get("q_identity_dev") for r in sub)[0],
            "R_minus_q_identity_dev": _mean_se(r.get("R_minus_q_identity_dev") for r in sub)[0],
            "n_flagged": int(sum(r.get("flagged", 0) for r in sub)),
            "max_abs_J_over_sqrt_n": max((r["max_abs_J"] for r in sub), default=math.nan),
        })
    return rows, per_instance


def factorization_slope(rows: list) -> float:
    """Fitted log-log slope of the factorization column against N."""
    return _loglog_slope([r["N"] for r in rows], [r["factorization"] for r in rows])


# --- driver ------------------------------------------------------------------


def run(spec: ExperimentSpec, workers: int = 1) -> ResultRecord:
    """Run any command and wrap the rows in a :class:`ResultRecord`."""
    start = time.time()
    p = spec.params
    streams: dict = {}
    if spec.command == "capacity":
        k_grid = p.get("k_grid") or list(np.round(np.arange(p["k_min"], p["k_max"] + 0.5 * p["k_step"], p["k_step"]), 12))
        rows = run_capacity_scan(k_grid)[1]
        cols = CAPACITY_COLUMNS
    elif spec.command == "free-energy":
        alphas = p["alpha"] if isinstance(p["alpha"], list) else [p["alpha"]]
        eps = p.get("eps") or []
        rows = run_theory_table(alphas, float(p.get("k", 0.0)), eps)
        cols = theory_columns(eps)
    elif spec.command == "saddle":
        rows = run_saddle(ModelParams(**{k: float(p[k]) for k in ("alpha", "k", "h", "z", "eps") if k in p}))
        cols = SADDLE_COLUMNS
    elif spec.command == "simulate-volume":
        rows, _ = run_volume_experiment(spec, workers)
        cols = VOLUME_COLUMNS
        streams = {k: v for k, v in STREAM_MAP.items() if k.startswith("volume")}
    else:
        rows, _ = run_gibbs_experiment(spec, workers)
        streams = {k: v for k, v in STREAM_MAP.items() if k.startswith("gibbs")}
        if spec.command == "factorization":
            slope = factorization_slope(rows)
            rows = [{"N": r["N"], "p": r["p"], "factorization": r["factorization"],
                     "factorization_se": r["factorization_se"], "analytic_alpha0": 1.0 / (r["N"] * r["z"] ** 2),
                     "loglog_slope": slope} for r in rows]
            cols = ["N", "p", "factorization", "factorization_se", "analytic_alpha0", "loglog_slope"]
        elif spec.command == "consistency":
            cols = ["N", "p", "q_N", "q_N_se", "R_N", "R_N_se", "q_star", "R_star",
                    "q_identity_dev", "R_minus_q_identity_dev", "n_flagged"]
            rows = [{c: r[c] for c in cols} for r in rows]
        else:
            cols = GIBBS_COLUMNS
    meta = _meta(start, streams)
    if spec.N_list:
        meta["p_per_N"] = {str(N): pattern_count(int(N), float(p["alpha"])) for N in spec.N_list}
    return ResultRecord(spec.echo(), rows, meta, list(cols))


def write_record(record: ResultRecord, fmt: str, path: str | None) -> str:
    text = record.to_json() if fmt == "json" else record.to_csv()
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


__all__ = [
    "ExperimentSpec", "ResultRecord", "derive_stream", "run", "run_capacity_scan", "run_theory_table",
    "run_volume_experiment", "run_gibbs_experiment", "factorization_slope", "write_record",
    "SaddleNonConvergence",
]
