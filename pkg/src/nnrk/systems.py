"""Autonomous ODE systems ``x' = f(x, p)`` used as test problems.

States and parameters are plain float64 numpy arrays. Vector fields index
components with ``x[..., i]`` so that a stack of states of shape
``(batch, state_dim)`` can be advanced in one call; the reference
integrator uses this to integrate several parameter values at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

VectorField = Callable[[np.ndarray, np.ndarray], np.ndarray]
ExactFlow = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def as_state(values, dim: int | None = None, name: str = "state") -> np.ndarray:
    """Convert ``values`` to a finite 1-D float64 vector, checking its length."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ConfigError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite entries: {arr.tolist()}")
    return arr


def as_params(values, dim: int | None = None) -> np.ndarray:
    if values is None:
        values = []
    return as_state(values, dim, name="parameter vector")


@dataclass(frozen=True)
class OdeSystem:
    """An immutable autonomous vector field with optional exact flow.

    Attributes:
        name: registry name of the system.
        state_dim: number of state components.
        param_dim: number of parameters read from the parameter vector.
        rhs: the vector field ``f(x, p)``.
        exact_flow: ``flow(t, x, p)`` when a closed form exists.
        default_x0: initial condition used when a config omits one.
        param_interval: default in-distribution parameter box, one
            ``(low, high)`` pair per parameter.
        ood_interval: default out-of-distribution parameter box.
    """

    name: str
    state_dim: int
    param_dim: int
    rhs: VectorField = field(repr=False)
    exact_flow: Optional[ExactFlow] = field(default=None, repr=False)
    default_x0: tuple[float, ...] = ()
    param_interval: tuple[tuple[float, float], ...] = ()
    ood_interval: tuple[tuple[float, float], ...] = ()

    def eval(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Evaluate the vector field at state ``x`` with parameters ``p``."""
        return self.rhs(x, p)

    __call__ = eval

    def flow(self, t: float, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        if self.exact_flow is None:
            raise NotImplementedError(f"system {self.name!r} has no exact flow")
        if t == 0:
            return np.array(x, dtype=np.float64, copy=True)
        return self.exact_flow(t, x, p)


def make_linear_system(lam: float = 1.0) -> OdeSystem:
    """Scalar linear ODE ``x' = lam * x`` with flow ``x * exp(lam * t)``; no parameters."""
    rate = float(lam)
    if not np.isfinite(rate):
        raise ConfigError(f"lambda must be finite, got {lam}")

    def rhs(x, p):
        return rate * np.asarray(x, dtype=np.float64)

    def flow(t, x, p):
        return np.asarray(x, dtype=np.float64) * np.exp(rate * t)

    return OdeSystem("linear", 1, 0, rhs, flow, default_x0=(1.0,))


def make_linear_family(lam: float = 1.0) -> OdeSystem:
    """Shifted linear ODE ``x' = lam * (x - c)`` with the equilibrium ``c = p[0]``.

    The exact flow is ``c + (x - c) exp(lam t)``; at ``c = 0`` this is the
    plain linear system. Its scaled local error is linear in ``(x, c)``.
    """
    rate = float(lam)

    def rhs(x, p):
        x = np.asarray(x, dtype=np.float64)
        return rate * (x - np.asarray(p, dtype=np.float64)[..., 0:1])

    def flow(t, x, p):
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(p, dtype=np.float64)[..., 0:1]
        return c + (x - c) * np.exp(rate * t)

    return OdeSystem(
        "linear",
        1,
        1,
        rhs,
        flow,
        default_x0=(0.5,),
        param_interval=((-0.5, 0.0),),
        ood_interval=((-1.5, -0.5),),
    )


def make_vanderpol() -> OdeSystem:
    """Van der Pol oscillator ``x1' = x2, x2' = mu (1 - x1^2) x2 - x1``; ``mu = p[0]``."""

    def rhs(x, p):
        x = np.asarray(x, dtype=np.float64)
        mu = np.asarray(p, dtype=np.float64)[..., 0]
        x1 = x[..., 0]
        x2 = x[..., 1]
        return np.stack((x2, mu * (1.0 - x1 * x1) * x2 - x1), axis=-1)

    return OdeSystem(
        "vanderpol",
        2,
        1,
        rhs,
        default_x0=(2.0, 0.5),
        param_interval=((0.5, 2.0),),
        ood_interval=((2.0, 4.0),),
    )


def make_pendulum() -> OdeSystem:
    """Damped pendulum ``x1' = x2, x2' = -sin(x1) - c x2``; damping ``c = p[0]``."""

    def rhs(x, p):
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(p, dtype=np.float64)[..., 0]
        x1 = x[..., 0]
        x2 = x[..., 1]
        return np.stack((x2, -np.sin(x1) - c * x2), axis=-1)

    return OdeSystem(
        "pendulum",
        2,
        1,
        rhs,
        default_x0=(1.0, 0.5),
        param_interval=((0.05, 0.3),),
        ood_interval=((0.3, 1.0),),
    )


SYSTEMS: dict[str, Callable[[], OdeSystem]] = {
    "linear": make_linear_family,
    "vanderpol": make_vanderpol,
    "pendulum": make_pendulum,
}


def get_system(name: str) -> OdeSystem:
    """Look up a system by registry name."""
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown system {name!r}; choose from {sorted(SYSTEMS)}"
        ) from None


def param_grid(values: Sequence, dim: int) -> list[np.ndarray]:
    """Normalize a list of scalars or vectors into parameter vectors of length ``dim``."""
    return [as_params(np.atleast_1d(v), dim) for v in values]
