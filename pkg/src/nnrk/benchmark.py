"""Accuracy-versus-effort benchmarking of the solver variants.

Two quantities are reported per run. The cost proxy ``delta_t`` is the time
spent on vector-field and network evaluations per simulated second,

    delta_t = (n_rk * time_f + n_net * time_net) / h,

and ``delta_e`` is the global relative squared error against a reference
solution on the coarse grid. Sweeps run every (solver, h, parameter)
combination and aggregate medians, quartiles and 1.5 IQR outliers.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import timeit
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .enhanced import HybridConfig, enhanced_integrate, fallback_rate, hybrid_integrate
from .errors import ConfigError, NnrkError
from .rk import (
    ButcherTableau,
    Trajectory,
    embedded_pair_for,
    format_float,
    integrate,
    reference_integrate,
    richardson_integrate,
    steps_between,
    subsample,
)
from .systems import OdeSystem, as_state

SOLVER_KINDS = ("plain", "richardson", "enhanced", "hybrid")
DELTA_E_EPS = 1e-18
MIN_TIMING_CALLS = 10**5
CLOCK_FLOOR = 1e-8


@dataclass(frozen=True)
class CostModel:
    """Per-evaluation timings and per-step evaluation counts of one solver.

    Attributes:
        time_f: seconds per vector-field evaluation.
        time_net: seconds per network forward pass (0 without a network).
        n_rk: vector-field evaluations per step.
        n_net: network evaluations per step.
        h: step size the cost refers to.
    """

    time_f: float
    time_net: float
    n_rk: int
    n_net: int
    h: float = 1.0

    def __post_init__(self):
        if self.time_f < 0 or self.time_net < 0:
            raise ValueError("timings must be non-negative")
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")

    @property
    def delta_t(self) -> float:
        """Evaluation time per simulated time unit."""
        return (self.n_rk * self.time_f + self.n_net * self.time_net) / self.h

    def at_step(self, h: float) -> "CostModel":
        return replace(self, h=h)


def _propagation_stages(tab: ButcherTableau) -> int:
    # mirrors rk_step(embedded=False): trailing zero-weight stages are skipped
    n = tab.stages
    while n > 1 and tab.b[n - 1] == 0.0:
        n -= 1
    return n


def evaluation_counts(kind: str, tab: ButcherTableau) -> tuple[int, int]:
    """Return ``(n_rk, n_net)`` per step for a solver kind built on ``tab``.

    ``tab`` is the base scheme; hybrid solvers run its embedded pair, whose
    extra stage is shared between both orders. Richardson takes one full
    and two half steps.
    """
    if kind == "plain":
        return _propagation_stages(tab), 0
    if kind == "richardson":
        return 3 * _propagation_stages(tab), 0
    if kind == "enhanced":
        return _propagation_stages(tab), 1
    if kind == "hybrid":
        return embedded_pair_for(tab.name).stages, 1
    raise ConfigError(f"unknown solver kind {kind!r}; choose from {SOLVER_KINDS}")


def _time_per_call(fn: Callable[[], object], n_calls: int, repeats: int) -> float:
    fn()  # warm-up
    best = min(timeit.Timer(fn).repeat(repeat=repeats, number=n_calls))
    per_call = best / n_calls
    if per_call < CLOCK_FLOOR:
        warnings.warn(
            f"measured {per_call:.3g} s per call, below timer resolution; "
            "value is amortized over the batch",
            RuntimeWarning,
            stacklevel=3,
        )
    return per_call


def measure_cost(
    sys: OdeSystem,
    net,
    tab: ButcherTableau,
    h: float = 1.0,
    kind: str | None = None,
    n_calls: int = 10**6,
    repeats: int = 3,
    x: np.ndarray | None = None,
    p: np.ndarray | None = None,
) -> CostModel:
    """Time single evaluations of ``f`` (and ``net``) and build a cost model.

    Each timing is the best of ``repeats`` batches of ``n_calls`` calls,
    divided by ``n_calls``. ``kind`` defaults to ``"enhanced"`` when a
    network is given and ``"plain"`` otherwise.

    Raises:
        ConfigError: fewer than 10**5 calls per batch were requested.
    """
    if n_calls < MIN_TIMING_CALLS:
        raise ConfigError(f"timing needs at least {MIN_TIMING_CALLS} calls, got {n_calls}")
    kind = kind or ("enhanced" if net is not None else "plain")
    n_rk, n_net = evaluation_counts(kind, tab)
    if n_net and net is None:
        raise ConfigError(f"solver kind {kind!r} needs a network")
    x = np.asarray(sys.default_x0 if x is None else x, dtype=np.float64)
    if p is None:
        p = np.array([lo for lo, _ in sys.param_interval], dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)

    time_f = _time_per_call(lambda: sys.rhs(x, p), n_calls, repeats)
    time_net = _time_per_call(lambda: net(x, p), n_calls, repeats) if n_net else 0.0
    return CostModel(time_f, time_net, n_rk, n_net, h)


def global_error(reference: Trajectory, candidate: Trajectory) -> float:
    """Mean squared relative error over steps ``k >= 1`` and all components.

    Terms are accumulated with :func:`math.fsum`, so the result does not
    depend on the summation order.

    Raises:
        ConfigError: the trajectories do not share a time grid.
    """
    ref = np.asarray(reference.states, dtype=np.float64)
    cand = np.asarray(candidate.states, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ConfigError(f"grid mismatch: reference {ref.shape} vs candidate {cand.shape}")
    if not math.isclose(reference.h, candidate.h, rel_tol=1e-12):
        raise ConfigError(f"grid mismatch: step {reference.h!r} vs {candidate.h!r}")
    if ref.shape[0] < 2:
        raise ConfigError("global error needs at least one step after the initial state")
    ref = ref[1:].reshape(ref.shape[0] - 1, -1)
    cand = cand[1:].reshape(ref.shape)
    terms = (np.abs(ref - cand) / (np.abs(ref) + DELTA_E_EPS)) ** 2
    return math.fsum(terms.ravel().tolist()) / terms.size


@dataclass(frozen=True)
class Solver:
    """A named solver variant.

    Attributes:
        label: identifier written to the solver column.
        kind: one of ``plain``, ``richardson``, ``enhanced``, ``hybrid``.
        tab: base tableau; the hybrid solver uses its embedded pair.
        net: correction model for enhanced and hybrid solvers.
        hybrid: calibrated safeguard settings for the hybrid solver.
    """

    label: str
    kind: str
    tab: ButcherTableau
    net: object = field(default=None, repr=False, compare=False)
    hybrid: Optional[HybridConfig] = None

    def __post_init__(self):
        n_rk, n_net = evaluation_counts(self.kind, self.tab)
        if n_net and self.net is None:
            raise ConfigError(f"solver {self.label!r} needs a network")
        if self.kind == "hybrid" and (self.hybrid is None or self.hybrid.delta_max is None):
            raise ConfigError(f"solver {self.label!r} needs a calibrated delta_max")

    def run(self, sys: OdeSystem, x0, p, h: float, n_steps: int) -> tuple[Trajectory, float]:
        """Integrate and return the trajectory and the fallback rate (NaN if not hybrid)."""
        if self.kind == "plain":
            return integrate(sys, self.tab, x0, p, h, n_steps), math.nan
        if self.kind == "richardson":
            return richardson_integrate(sys, self.tab, x0, p, h, n_steps), math.nan
        if self.kind == "enhanced":
            return enhanced_integrate(sys, self.tab, self.net, x0, p, h, n_steps), math.nan
        pair = embedded_pair_for(self.tab.name)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            traj, records = hybrid_integrate(sys, pair, self.net, x0, p, h, n_steps, self.hybrid)
        return traj, fallback_rate(records)


@dataclass
class RunMetrics:
    """Outcome of one (solver, h, parameter) run.

    ``delta_e`` and ``fallback_rate`` are NaN for failed runs and
    ``fallback_rate`` is NaN for non-hybrid solvers. ``wall_time`` is the
    measured integration time, reported alongside the ``delta_t`` proxy.
    """

    solver: str
    h: float
    param_index: int
    param_value: tuple[float, ...]
    delta_t: float
    delta_e: float
    fallback_rate: float = math.nan
    in_distribution: bool = True
    wall_time: float = math.nan
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepSpec:
    """Description of a benchmark sweep.

    Attributes:
        sys: the test system.
        solvers: solver variants to compare.
        h_values: coarse step sizes; each must divide ``t_end``.
        x0: initial condition shared by all runs.
        t_end: simulated horizon.
        h_ref: step of the reference integrator.
        n_params: number of sampled parameter vectors.
        seed: sampler seed.
        param_interval: in-distribution box, one ``(low, high)`` per parameter.
        ood_interval: out-of-distribution box (used by the OOD sweep).
        ood_fraction: share of draws taken from ``ood_interval``.
        timing_calls: calls per timing batch for :func:`measure_cost`.
        costs: precomputed cost models by solver label; skips timing.
    """

    sys: OdeSystem
    solvers: Sequence[Solver]
    h_values: Sequence[float]
    x0: Sequence[float]
    t_end: float
    h_ref: float = 1e-3
    n_params: int = 10
    seed: int = 0
    param_interval: Optional[Sequence[Sequence[float]]] = None
    ood_interval: Optional[Sequence[Sequence[float]]] = None
    ood_fraction: float = 0.25
    timing_calls: int = 10**6
    costs: Optional[dict] = None


@dataclass
class SweepResult:
    runs: list[RunMetrics]
    medians: list[RunMetrics]
    summary: dict


def _box(interval, dim: int, what: str) -> np.ndarray:
    box = np.asarray(interval, dtype=np.float64).reshape(-1, 2)
    if box.shape[0] != dim:
        raise ConfigError(f"{what} has {box.shape[0]} rows, system has {dim} parameters")
    if np.any(box[:, 1] < box[:, 0]) or not np.all(np.isfinite(box)):
        raise ConfigError(f"{what} must hold finite (low, high) pairs, got {box.tolist()}")
    return box


def sample_params(rng: np.random.Generator, interval, n: int) -> np.ndarray:
    """Draw ``n`` parameter vectors uniformly from a box."""
    box = np.asarray(interval, dtype=np.float64).reshape(-1, 2)
    return rng.uniform(box[:, 0], box[:, 1], size=(n, box.shape[0]))


def ood_split(n: int, fraction: float) -> tuple[int, int]:
    """Split ``n`` draws into (in-distribution, out-of-distribution) counts."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"ood_fraction must lie in [0, 1], got {fraction}")
    n_ood = int(math.floor(n * fraction + 1e-9))
    return n - n_ood, n_ood


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    return float(q1), float(med), float(q3)


def summarize(runs: Sequence[RunMetrics]) -> tuple[list[RunMetrics], dict]:
    """Median rows and boxplot statistics per (solver, h).

    Outliers are runs whose ``delta_e`` lies more than 1.5 IQR outside the
    quartiles. Failed runs are counted but excluded from the statistics.
    """
    groups: dict[tuple[str, float], list[RunMetrics]] = {}
    for r in runs:
        groups.setdefault((r.solver, r.h), []).append(r)
    medians, stats = [], []
    for (solver, h), rows in sorted(groups.items()):
        good = [r for r in rows if r.ok]
        entry = {"solver": solver, "h": h, "n_runs": len(rows), "n_failed": len(rows) - len(good)}
        if good:
            de = np.array([r.delta_e for r in good])
            dt = np.array([r.delta_t for r in good])
            q1, med, q3 = _quartiles(de)
            iqr = q3 - q1
            lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
            fb = np.array([r.fallback_rate for r in good])
            entry.update(
                median_delta_e=med,
                q1_delta_e=q1,
                q3_delta_e=q3,
                max_delta_e=float(de.max()),
                median_delta_t=float(np.median(dt)),
                median_fallback_rate=None if np.all(np.isnan(fb)) else float(np.nanmedian(fb)),
                outliers=[
                    {"param_seed_index": r.param_index, "delta_e": r.delta_e}
                    for r in good
                    if r.delta_e < lo or r.delta_e > hi
                ],
            )
            medians.append(
                RunMetrics(solver, h, -1, (), float(np.median(dt)), med, status="median")
            )
        stats.append(entry)
    return medians, {"groups": stats}


def _thread_count() -> int:
    raw = os.environ.get("NNRK_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NNRK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"NNRK_THREADS must be positive, got {n}")
    return n


def _run_sweep(spec: SweepSpec, params: np.ndarray, in_dist: np.ndarray) -> SweepResult:
    sys = spec.sys
    x0 = as_state(spec.x0, sys.state_dim, "x0")
    if not spec.solvers:
        raise ConfigError("sweep needs at least one solver")
    labels = [s.label for s in spec.solvers]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"solver labels must be unique, got {labels}")
    grids = {h: steps_between(spec.t_end, h, "t_end") for h in spec.h_values}
    for h in spec.h_values:
        steps_between(h, spec.h_ref, "h")

    # timing runs first and alone, before any worker threads exist
    costs = dict(spec.costs or {})
    for s in spec.solvers:
        if s.label not in costs:
            costs[s.label] = measure_cost(sys, s.net, s.tab, kind=s.kind, n_calls=spec.timing_calls)

    ref = reference_integrate(sys, np.tile(x0, (len(params), 1)), params, spec.h_ref, spec.t_end)

    def job(args):
        solver, h, j = args
        p = params[j]
        cost = costs[solver.label].at_step(h)
        base = dict(
            solver=solver.label,
            h=h,
            param_index=j,
            param_value=tuple(float(v) for v in p),
            delta_t=cost.delta_t,
            in_distribution=bool(in_dist[j]),
        )
        ref_j = subsample(Trajectory(spec.h_ref, ref.states[:, j], p), h)
        t0 = time.perf_counter()
        try:
            traj, fb = solver.run(sys, x0, p, h, grids[h])
            de = global_error(ref_j, traj)
        except NnrkError as err:
            return RunMetrics(
                delta_e=math.nan,
                wall_time=time.perf_counter() - t0,
                status=f"failed: {err}",
                **base,
            )
        return RunMetrics(delta_e=de, fallback_rate=fb, wall_time=time.perf_counter() - t0, **base)

    jobs = [(s, h, j) for s in spec.solvers for h in spec.h_values for j in range(len(params))]
    n_threads = min(_thread_count(), len(jobs))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            runs = list(pool.map(job, jobs))
    else:
        runs = [job(a) for a in jobs]
    runs.sort(key=lambda r: (r.solver, r.h, r.param_index))
    medians, summary = summarize(runs)
    summary.update(
        system=sys.name,
        n_params=len(params),
        seed=spec.seed,
        t_end=spec.t_end,
        h_ref=spec.h_ref,
    )
    return SweepResult(runs, medians, summary)


def sweep(spec: SweepSpec) -> SweepResult:
    """Run every solver at every step size on seeded in-distribution draws."""
    box = _box(spec.param_interval or spec.sys.param_interval, spec.sys.param_dim, "param_interval")
    if spec.n_params < 1:
        raise ConfigError(f"n_params must be positive, got {spec.n_params}")
    rng = np.random.default_rng(spec.seed)
    params = sample_params(rng, box, spec.n_params)
    return _run_sweep(spec, params, np.ones(len(params), dtype=bool))


def out_of_distribution_sweep(spec: SweepSpec) -> SweepResult:
    """Like :func:`sweep`, with ``ood_fraction`` of the draws taken from ``ood_interval``.

    In-distribution draws come first, so parameter indices below the
    in-distribution count are in-distribution.
    """
    sys = spec.sys
    box_in = _box(spec.param_interval or sys.param_interval, sys.param_dim, "param_interval")
    box_out = _box(spec.ood_interval or sys.ood_interval, sys.param_dim, "ood_interval")
    if spec.n_params < 1:
        raise ConfigError(f"n_params must be positive, got {spec.n_params}")
    n_in, n_out = ood_split(spec.n_params, spec.ood_fraction)
    rng = np.random.default_rng(spec.seed)
    params = np.concatenate([sample_params(rng, box_in, n_in), sample_params(rng, box_out, n_out)])
    in_dist = np.arange(len(params)) < n_in
    result = _run_sweep(spec, params, in_dist)
    result.summary.update(n_in_distribution=n_in, n_out_of_distribution=n_out)
    return result


CSV_COLUMNS = [
    "solver",
    "h",
    "param_seed_index",
    "param_value",
    "delta_t",
    "delta_e",
    "fallback_rate",
    "in_distribution",
    "wall_time",
    "status",
]


def write_metrics_csv(runs: Sequence[RunMetrics], path: str | Path) -> None:
    """One row per run; vector parameters are joined with ``;``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in runs:
            writer.writerow(
                [
                    r.solver,
                    format_float(r.h),
                    r.param_index,
                    ";".join(format_float(v) for v in r.param_value),
                    format_float(r.delta_t),
                    format_float(r.delta_e),
                    format_float(r.fallback_rate),
                    int(r.in_distribution),
                    format_float(r.wall_time),
                    r.status,
                ]
            )


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_summary_json(result: SweepResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(result.summary), fh, indent=2, allow_nan=False)
        fh.write("\n")
