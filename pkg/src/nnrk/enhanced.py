"""Network-corrected Runge-Kutta steps and the embedded-pair safeguard.

A correction model is any callable ``net(x, p) -> array`` returning the
predicted scaled local error for state ``x`` and parameters ``p``;
:class:`~nnrk.mlp.Mlp` instances qualify. The enhanced step is

    x_next = step_h(x) + h**(p + 1) * net(x, p)

The hybrid solver runs an embedded pair (orders p and p + 1) and keeps the
corrected low-order result only while the network agrees with the pair's
own local-error estimate; otherwise it takes the order p + 1 result.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, CorrectionError, IntegrationError
from .learning import Dataset
from .rk import ButcherTableau, Trajectory, check_state, format_float, rk_step
from .systems import OdeSystem

Correction = Callable[[np.ndarray, np.ndarray], np.ndarray]

NORM_KINDS = ("max", "averaged-l2")


def _correction(net: Correction, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    corr = np.asarray(net(x, p), dtype=np.float64)
    if corr.shape != np.shape(x):
        raise ConfigError(f"correction has shape {corr.shape}, state has shape {np.shape(x)}")
    return corr


def enhanced_step(
    sys: OdeSystem, tab: ButcherTableau, net: Correction, x: np.ndarray, p: np.ndarray, h: float
) -> np.ndarray:
    """Base step of ``tab`` plus ``h**(order + 1)`` times the network correction.

    Raises:
        CorrectionError: the network output is non-finite.
        IntegrationError: the vector field blew up inside a stage.
    """
    base = rk_step(sys, tab, x, p, h, embedded=False).next
    corr = _correction(net, x, p)
    if not np.all(np.isfinite(corr)):
        raise CorrectionError("non-finite network correction")
    return base + h ** (tab.order + 1) * corr


def enhanced_integrate(
    sys: OdeSystem,
    tab: ButcherTableau,
    net: Correction,
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
            x = enhanced_step(sys, tab, net, x, p, h)
            check_state(x)
        except IntegrationError as err:
            raise err.at_step(k) from err
        states[k + 1] = x
    return Trajectory(h, states, np.asarray(p, dtype=np.float64))


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the global error bound for an enhanced integrator.

    Attributes:
        lip_flow: Lipschitz constant of the base discrete flow.
        lip_net: Lipschitz constant of the network.
        eps_nn: bound on ``|r - h^(p+1) net| / h^(p+1)`` at exact states.
        p: order of the base scheme.
        h: step size.
    """

    lip_flow: float
    lip_net: float
    eps_nn: float
    p: int
    h: float

    def __post_init__(self):
        vals = (self.lip_flow, self.lip_net, self.eps_nn, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("bound parameters must be finite")
        if self.lip_flow < 0 or self.lip_net < 0:
            raise ValueError("Lipschitz constants must be non-negative")
        if self.eps_nn <= 0 or self.h <= 0:
            raise ValueError("eps_nn and h must be positive")

    @property
    def alpha(self) -> float:
        return self.lip_flow + self.h ** (self.p + 1) * self.lip_net

    @property
    def beta(self) -> float:
        return self.eps_nn * self.h ** (self.p + 1)


def error_bound(bp: BoundParams, k: int) -> float:
    """Upper bound on the global error ``|e_{k+1}|`` after ``k + 1`` enhanced steps.

    With ``alpha = L_flow + h^(p+1) L_net`` and ``beta = eps_nn h^(p+1)``:

    * ``alpha > 1``: ``beta * (exp((k+1)(alpha-1)) - 1) / (alpha - 1)``
    * ``alpha = 1``: ``beta * (k + 1)``
    * ``0 < alpha < 1``: ``beta / (1 - alpha)``

    Raises:
        ValueError: ``alpha <= 0`` or ``k < 0``.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    alpha, beta = bp.alpha, bp.beta
    if alpha <= 0:
        raise ValueError(f"bound requires alpha > 0, got {alpha}")
    if alpha > 1:
        return beta * math.expm1((k + 1) * (alpha - 1)) / (alpha - 1)
    if alpha == 1:
        return beta * (k + 1)
    return beta / (1 - alpha)


@dataclass
class HybridConfig:
    """Tolerances and threshold of the hybrid solver.

    ``atol``/``rtol`` are per-component (a scalar is broadcast). ``delta_max``
    stays None until calibrated.
    """

    atol: np.ndarray | float = 1e-6
    rtol: np.ndarray | float = 1e-3
    kappa: float = 1.2
    delta_max: Optional[float] = None
    norm_kind: str = "max"

    def __post_init__(self):
        self.atol = np.atleast_1d(np.asarray(self.atol, dtype=np.float64))
        self.rtol = np.atleast_1d(np.asarray(self.rtol, dtype=np.float64))
        if not self.kappa >= 1.0:
            raise ConfigError(f"kappa must be >= 1, got {self.kappa}")
        if np.any(self.atol < 0) or np.any(self.rtol < 0):
            raise ConfigError("atol and rtol must be non-negative")
        if not (np.any(self.atol > 0) or np.any(self.rtol > 0)):
            raise ConfigError("atol and rtol cannot both be all zero")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.delta_max is not None and not self.delta_max >= 0:
            raise ConfigError(f"delta_max must be >= 0, got {self.delta_max}")


def scaling_factors(x: np.ndarray, next_high: np.ndarray, cfg: HybridConfig) -> np.ndarray:
    """``atol_i + max(|x_i|, |next_high_i|) * rtol_i``."""
    x = np.asarray(x, dtype=np.float64)
    next_high = np.asarray(next_high, dtype=np.float64)
    if x.shape != next_high.shape:
        raise ConfigError("state and high-order result differ in shape")
    return cfg.atol + np.maximum(np.abs(x), np.abs(next_high)) * cfg.rtol


def normalize_discrepancy(delta: np.ndarray, sc: np.ndarray) -> np.ndarray:
    """Component-wise ``delta / sc``; ``0/0`` gives 0 and ``d/0`` gives inf."""
    delta = np.asarray(delta, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = delta / sc
    zero_sc = sc == 0
    return np.where(zero_sc & (delta == 0), 0.0, out)


def norm_normalized(delta_tilde: np.ndarray, kind: str = "max", axis: int = -1) -> np.ndarray | float:
    """Max norm, or the averaged l2 norm ``sqrt(mean(d_i^2))``, along ``axis``."""
    v = np.asarray(delta_tilde, dtype=np.float64)
    if kind == "max":
        out = np.max(np.abs(v), axis=axis, initial=0.0)
    elif kind == "averaged-l2":
        out = np.sqrt(np.mean(v * v, axis=axis)) if v.shape[axis] else np.zeros(v.shape[:axis])
    else:
        raise ConfigError(f"unknown norm kind {kind!r}")
    return float(out) if np.ndim(out) == 0 else out


def _check_pair(tab: ButcherTableau) -> int:
    if not tab.is_embedded:
        raise ConfigError(f"tableau {tab.name!r} has no embedded weights")
    return tab.order_embedded


def calibrate_delta_max(
    net: Correction,
    dataset: Dataset,
    sys: OdeSystem,
    tab_embedded: ButcherTableau,
    cfg: HybridConfig,
) -> float:
    """``kappa`` times the largest normalized network discrepancy over ``dataset``.

    For every sample the embedded pair provides the local-error estimate
    ``eps = high - low``; the discrepancy is ``eps - h^(p+1) net(x, p)``,
    normalized by :func:`scaling_factors` and measured with ``cfg.norm_kind``.
    """
    p = _check_pair(tab_embedded)
    if len(dataset) == 0:
        raise ConfigError("cannot calibrate on an empty dataset")
    if dataset.base_order != p:
        raise ConfigError(
            f"dataset was built for order {dataset.base_order}, pair {tab_embedded.name!r} "
            f"embeds order {p}"
        )
    if dataset.system != sys.name:
        raise ConfigError(f"dataset system {dataset.system!r} != {sys.name!r}")
    h = dataset.h
    res = rk_step(sys, tab_embedded, dataset.states, dataset.params, h)
    eps = res.next - res.next_embedded
    delta = eps - h ** (p + 1) * _correction(net, dataset.states, dataset.params)
    sc = scaling_factors(dataset.states, res.next, cfg)
    norms = norm_normalized(normalize_discrepancy(delta, sc), cfg.norm_kind, axis=-1)
    worst = float(np.max(norms))
    if not math.isfinite(worst):
        raise ConfigError("calibration produced a non-finite discrepancy")
    return cfg.kappa * worst


@dataclass
class HybridStepRecord:
    used_network: bool
    normalized_discrepancy: float
    next: np.ndarray = field(repr=False)
    warning: Optional[str] = None


def hybrid_step(
    sys: OdeSystem,
    tab: ButcherTableau,
    net: Correction,
    x: np.ndarray,
    p: np.ndarray,
    h: float,
    cfg: HybridConfig,
) -> HybridStepRecord:
    """One step of the safeguarded enhanced integrator.

    Returns either the corrected low-order result (discrepancy within
    ``cfg.delta_max``) or exactly the high-order result of the pair.
    """
    order = _check_pair(tab)
    res = rk_step(sys, tab, x, p, h)
    high, low = res.next, res.next_embedded
    hp = h ** (order + 1)
    corr = _correction(net, x, p)
    delta = (high - low) - hp * corr
    sc = scaling_factors(x, high, cfg)
    disc = norm_normalized(normalize_discrepancy(delta, sc), cfg.norm_kind)

    warning = None
    if np.any((sc == 0) & (delta != 0)):
        warning = "zero scaling factor with nonzero discrepancy"
    elif not np.all(np.isfinite(corr)):
        warning = "non-finite network correction"
    if warning is None and disc <= cfg.delta_max:
        return HybridStepRecord(True, disc, low + hp * corr)
    if warning is not None:
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
        if not math.isfinite(disc):
            disc = math.inf
    return HybridStepRecord(False, disc, high, warning)


def hybrid_integrate(
    sys: OdeSystem,
    tab_embedded: ButcherTableau,
    net: Correction,
    x0: np.ndarray,
    p: np.ndarray,
    h: float,
    n_steps: int,
    cfg: HybridConfig,
) -> tuple[Trajectory, list[HybridStepRecord]]:
    """Integrate with :func:`hybrid_step`; one record per step, in step order."""
    _check_pair(tab_embedded)
    if cfg.delta_max is None:
        raise ConfigError("hybrid integration needs a calibrated delta_max")
    x = np.asarray(x0, dtype=np.float64)
    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    records = []
    for k in range(n_steps):
        try:
            rec = hybrid_step(sys, tab_embedded, net, x, p, h, cfg)
            check_state(rec.next)
        except IntegrationError as err:
            raise err.at_step(k) from err
        x = rec.next
        states[k + 1] = x
        records.append(rec)
    return Trajectory(h, states, np.asarray(p, dtype=np.float64)), records


def fallback_rate(records: list[HybridStepRecord]) -> float:
    if not records:
        return 0.0
    return sum(not r.used_network for r in records) / len(records)


def write_hybrid_report(records: list[HybridStepRecord], path: str | Path) -> None:
    """CSV with columns ``k, used_network, normalized_discrepancy``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "used_network", "normalized_discrepancy"])
        for k, rec in enumerate(records):
            writer.writerow([k, int(rec.used_network), format_float(rec.normalized_discrepancy)])
