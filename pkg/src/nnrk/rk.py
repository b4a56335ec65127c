"""Explicit Runge-Kutta steps, fixed-step trajectories and Richardson extrapolation.

All schemes are driven by a :class:`ButcherTableau`. An embedded pair
carries a second weight vector ``b_embedded`` that reuses the same stages;
by convention ``b`` holds the higher-order weights (the propagated result
of a plain integration) and ``b_embedded`` the lower-order ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, IntegrationError
from .systems import OdeSystem

#: Any state component above this magnitude aborts the integration.
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit Runge-Kutta scheme.

    Attributes:
        name: registry name.
        a: strictly lower-triangular stage matrix, one row per stage.
        b: propagation weights.
        c: stage nodes.
        order: order of the ``b`` weights.
        b_embedded: optional weights of a second, embedded scheme.
        order_embedded: order of ``b_embedded``.
    """

    name: str
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]
    order: int
    b_embedded: Optional[tuple[float, ...]] = None
    order_embedded: Optional[int] = None

    def __post_init__(self):
        s = len(self.b)
        if len(self.a) != s or len(self.c) != s:
            raise ConfigError(f"tableau {self.name}: inconsistent stage count")
        for i, row in enumerate(self.a):
            if len(row) != s or any(row[j] != 0.0 for j in range(i, s)):
                raise ConfigError(f"tableau {self.name}: a is not strictly lower triangular")
            if abs(sum(row) - self.c[i]) > 1e-12:
                raise ConfigError(f"tableau {self.name}: c[{i}] != sum of a[{i}]")
        if abs(sum(self.b) - 1.0) > 1e-12:
            raise ConfigError(f"tableau {self.name}: weights b do not sum to 1")
        if self.b_embedded is not None:
            if len(self.b_embedded) != s:
                raise ConfigError(f"tableau {self.name}: b_embedded has wrong length")
            if abs(sum(self.b_embedded) - 1.0) > 1e-12:
                raise ConfigError(f"tableau {self.name}: weights b_embedded do not sum to 1")
            if self.order_embedded is None:
                raise ConfigError(f"tableau {self.name}: order_embedded missing")

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def is_embedded(self) -> bool:
        return self.b_embedded is not None


def _tableau(name, a, b, order, b_embedded=None, order_embedded=None) -> ButcherTableau:
    """Build a tableau from exact rationals; ``a`` is given as its nonzero lower rows."""
    s = len(b)
    rows = []
    for i in range(s):
        given = a[i - 1] if i > 0 else ()
        row = [Fraction(v) for v in given] + [Fraction(0)] * (s - len(given))
        rows.append(row)
    c = tuple(float(sum(row)) for row in rows)
    return ButcherTableau(
        name=name,
        a=tuple(tuple(float(v) for v in row) for row in rows),
        b=tuple(float(Fraction(v)) for v in b),
        c=c,
        order=order,
        b_embedded=None if b_embedded is None else tuple(float(Fraction(v)) for v in b_embedded),
        order_embedded=order_embedded,
    )


def tableau_euler() -> ButcherTableau:
    """Forward Euler, one stage, order 1."""
    return _tableau("euler", [], [1], 1)


def tableau_heun() -> ButcherTableau:
    """Heun's method (explicit trapezoidal rule), two stages, order 2."""
    return _tableau("heun", [[1]], ["1/2", "1/2"], 2)


def tableau_heun_rk3_embedded() -> ButcherTableau:
    """Three-stage order-3 scheme whose first two stages are exactly Heun's.

    ``b`` gives the order-3 result and ``b_embedded`` reproduces Heun, so
    the embedded estimate costs a single extra evaluation of ``f``.
    """
    return _tableau(
        "heun_rk3",
        [[1], ["1/4", "1/4"]],
        ["1/6", "1/6", "2/3"],
        3,
        b_embedded=["1/2", "1/2", 0],
        order_embedded=2,
    )


def tableau_euler_heun_embedded() -> ButcherTableau:
    """Heun (order 2) with forward Euler embedded in its first stage."""
    return _tableau("euler_heun", [[1]], ["1/2", "1/2"], 2, b_embedded=[1, 0], order_embedded=1)


def tableau_rk4() -> ButcherTableau:
    return _tableau("rk4", [["1/2"], [0, "1/2"], [0, 0, 1]], ["1/6", "1/3", "1/3", "1/6"], 4)


def tableau_dopri5() -> ButcherTableau:
    """Dormand-Prince 5(4) pair; the order-5 weights are propagated."""
    return _tableau(
        "dopri5",
        [
            ["1/5"],
            ["3/40", "9/40"],
            ["44/45", "-56/15", "32/9"],
            ["19372/6561", "-25360/2187", "64448/6561", "-212/729"],
            ["9017/3168", "-355/33", "46732/5247", "49/176", "-5103/18656"],
            ["35/384", 0, "500/1113", "125/192", "-2187/6784", "11/84"],
        ],
        ["35/384", 0, "500/1113", "125/192", "-2187/6784", "11/84", 0],
        5,
        b_embedded=[
            "5179/57600", 0, "7571/16695", "393/640", "-92097/339200", "187/2100", "1/40",
        ],
        order_embedded=4,
    )


TABLEAUX = {
    "euler": tableau_euler,
    "heun": tableau_heun,
    "heun_rk3": tableau_heun_rk3_embedded,
    "euler_heun": tableau_euler_heun_embedded,
    "rk4": tableau_rk4,
    "dopri5": tableau_dopri5,
}

#: Embedded pair whose low-order weights reproduce each base scheme.
EMBEDDED_PAIRS = {"euler": "euler_heun", "heun": "heun_rk3"}


def get_tableau(name: str) -> ButcherTableau:
    try:
        return TABLEAUX[name]()
    except KeyError:
        raise ConfigError(f"unknown tableau {name!r}; choose from {sorted(TABLEAUX)}") from None


def embedded_pair_for(base: str) -> ButcherTableau:
    """Return the embedded pair whose ``b_embedded`` equals the base scheme ``base``."""
    try:
        return get_tableau(EMBEDDED_PAIRS[base])
    except KeyError:
        raise ConfigError(f"no embedded pair registered for base scheme {base!r}") from None


@dataclass
class StepResult:
    """Outcome of one Runge-Kutta step.

    ``next`` uses the ``b`` weights, ``next_embedded`` the ``b_embedded``
    weights (None for plain tableaux); ``stages`` holds the k_i evaluations.
    """

    next: np.ndarray
    next_embedded: Optional[np.ndarray]
    stages: list[np.ndarray]


@dataclass
class Trajectory:
    """States on the uniform grid ``t_k = k h``; ``states[0]`` is the initial condition."""

    h: float
    states: np.ndarray
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape[0] == 0:
            raise ValueError("trajectory must contain at least the initial state")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.states.shape[0])


def _weighted_sum(weights: Sequence[float], stages: Sequence[np.ndarray]):
    total = None
    for w, k in zip(weights, stages):
        if w == 0.0:
            continue
        term = w * k
        total = term if total is None else total + term
    return total


def check_state(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state after step")
    if np.max(np.abs(x), initial=0.0) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"state magnitude exceeded {DIVERGENCE_LIMIT:g}")


def rk_step(
    sys: OdeSystem,
    tab: ButcherTableau,
    x: np.ndarray,
    p: np.ndarray,
    h: float,
    embedded: bool = True,
) -> StepResult:
    """Advance ``x`` by one step of size ``h``.

    Stages are evaluated once and shared by both weight vectors of an
    embedded tableau. With ``embedded=False`` trailing stages that carry
    zero propagation weight (e.g. the FSAL stage of Dormand-Prince) are
    skipped and ``next_embedded`` is None.

    Raises:
        IntegrationError: a stage evaluation is non-finite; ``stage`` names it.
    """
    if not h > 0:
        raise ConfigError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    n_stages = tab.stages
    use_embedded = embedded and tab.b_embedded is not None
    if not use_embedded:
        while n_stages > 1 and tab.b[n_stages - 1] == 0.0:
            n_stages -= 1

    stages: list[np.ndarray] = []
    for i in range(n_stages):
        incr = _weighted_sum(tab.a[i][:i], stages)
        xi = x if incr is None else x + h * incr
        ki = np.asarray(sys.rhs(xi, p), dtype=np.float64)
        if ki.shape != x.shape:
            raise ConfigError(f"vector field returned shape {ki.shape}, expected {x.shape}")
        if not np.all(np.isfinite(ki)):
            raise IntegrationError(f"non-finite value in stage {i}", stage=i)
        stages.append(ki)

    nxt = x + h * _weighted_sum(tab.b, stages)
    nxt_emb = x + h * _weighted_sum(tab.b_embedded, stages) if use_embedded else None
    return StepResult(nxt, nxt_emb, stages)


def integrate(
    sys: OdeSystem,
    tab: ButcherTableau,
    x0: np.ndarray,
    p: np.ndarray,
    h: float,
    n_steps: int,
) -> Trajectory:
    """Fixed-step integration with the propagation weights ``b``."""
    if n_steps < 0:
        raise ConfigError(f"n_steps must be non-negative, got {n_steps}")
    x = np.asarray(x0, dtype=np.float64)
    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    for k in range(n_steps):
        try:
            x = rk_step(sys, tab, x, p, h, embedded=False).next
            check_state(x)
        except IntegrationError as err:
            raise err.at_step(k) from err
        states[k + 1] = x
    return Trajectory(h, states, np.asarray(p, dtype=np.float64))


def steps_between(span: float, h: float, what: str = "span") -> int:
    """Return ``span / h`` as an int, or raise if it is not integral."""
    if not h > 0:
        raise ConfigError(f"step size must be positive, got {h}")
    ratio = span / h
    n = int(round(ratio))
    if n < 0 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise ConfigError(f"{what} ({span!r}) is not an integer multiple of {h!r}")
    return n


def reference_integrate(
    sys: OdeSystem,
    x0: np.ndarray,
    p: np.ndarray,
    h_ref: float,
    t_end: float,
    h_out: float | None = None,
    tab: ButcherTableau | None = None,
) -> Trajectory:
    """High-order fixed-step reference solution.

    Integrates with Dormand-Prince (order 5) at step ``h_ref``. With
    ``h_out`` set, only the states at multiples of ``h_out`` are kept, so
    index ``k`` of the result is dense step ``k * round(h_out / h_ref)``.

    ``x0`` and ``p`` may carry a leading batch axis to integrate several
    initial conditions or parameter values in one sweep; the returned
    states then have shape ``(n_out + 1, batch, state_dim)``.

    Raises:
        ConfigError: ``h_out`` or ``t_end`` is not a multiple of ``h_ref``.
    """
    tab = tab or tableau_dopri5()
    if tab.order < 5:
        raise ConfigError(f"reference tableau must have order >= 5, got {tab.order}")
    n_dense = steps_between(t_end, h_ref, "t_end")
    stride = 1 if h_out is None else steps_between(h_out, h_ref, "h")
    if n_dense % stride:
        raise ConfigError(f"t_end ({t_end!r}) is not an integer multiple of h ({h_out!r})")

    x = np.asarray(x0, dtype=np.float64)
    states = np.empty((n_dense // stride + 1,) + x.shape)
    states[0] = x
    for j in range(1, n_dense + 1):
        try:
            x = rk_step(sys, tab, x, p, h_ref, embedded=False).next
            check_state(x)
        except IntegrationError as err:
            raise err.at_step(j - 1) from err
        if j % stride == 0:
            states[j // stride] = x
    return Trajectory(h_ref * stride, states, np.asarray(p, dtype=np.float64))


def subsample(traj: Trajectory, h: float) -> Trajectory:
    """Pick the states of ``traj`` that lie on the coarser grid ``k h``."""
    stride = steps_between(h, traj.h, "h")
    if stride == 0:
        raise ConfigError("subsampling step must be positive")
    return Trajectory(traj.h * stride, traj.states[::stride], traj.params)


def richardson_step(
    sys: OdeSystem, tab: ButcherTableau, x: np.ndarray, p: np.ndarray, h: float
) -> np.ndarray:
    """One step of size ``h`` extrapolated from one full and two half steps."""
    coarse = rk_step(sys, tab, x, p, h, embedded=False).next
    half = rk_step(sys, tab, x, p, 0.5 * h, embedded=False).next
    fine = rk_step(sys, tab, half, p, 0.5 * h, embedded=False).next
    scale = 2.0**tab.order
    return (scale * fine - coarse) / (scale - 1.0)


def richardson_integrate(
    sys: OdeSystem,
    tab: ButcherTableau,
    x0: np.ndarray,
    p: np.ndarray,
    h: float,
    n_steps: int,
) -> Trajectory:
    x = np.asarray(x0, dtype=np.float64)
    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    for k in range(n_steps):
        try:
            x = richardson_step(sys, tab, x, p, h)
            check_state(x)
        except IntegrationError as err:
            raise err.at_step(k) from err
        states[k + 1] = x
    return Trajectory(h, states, np.asarray(p, dtype=np.float64))


def format_float(v: float) -> str:
    """Shortest round-trip text for a float; keeps CSV output byte-stable."""
    return repr(float(v))


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    """Write ``t, x_1 .. x_n`` rows for a single (unbatched) trajectory."""
    states = traj.states.reshape(len(traj), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(states.shape[1])])
        for k, row in enumerate(states):
            writer.writerow([format_float(k * traj.h)] + [format_float(v) for v in row])


def read_trajectory_csv(path: str | Path, h: float | None = None) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if h is None:
        h = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 0.0
    return Trajectory(h, data[:, 1:])
