"""JSON run configuration shared by the command-line tools.

A config is a single JSON object with ``"config_version": 1``. Every output
of a run lands in ``<output_dir>/<run_id>/``; nothing is named after the
clock, so a rerun with the same config overwrites identical bytes.

Example::

    {
      "config_version": 1,
      "run_id": "vdp",
      "system": "vanderpol",
      "tableau": "heun",
      "h": 0.05, "h_ref": 0.001, "t_end": 20.0,
      "x0": [2.0, 0.5],
      "params": {"grid": [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0], "n_validation": 2},
      "network": {"hidden": [64, 64, 64], "seed": 0},
      "training": {"epochs": 800, "lr": 0.003},
      "hybrid": {"atol": 0.001, "rtol": 0.001, "kappa": 1.2, "norm_kind": "max"},
      "bench": {"solvers": [{"kind": "plain", "tableau": "heun"}], "h_values": [0.05]}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .benchmark import SOLVER_KINDS
from .enhanced import HybridConfig
from .errors import ConfigError
from .learning import TrainConfig, split_by_parameter
from .rk import TABLEAUX, embedded_pair_for, get_tableau, steps_between
from .systems import SYSTEMS, OdeSystem, as_state, get_system

CONFIG_VERSION = 1

_TOP_KEYS = {
    "config_version",
    "run_id",
    "output_dir",
    "system",
    "tableau",
    "h",
    "h_ref",
    "t_end",
    "x0",
    "params",
    "simulate_params",
    "network",
    "training",
    "hybrid",
    "bench",
}


def _field(data: dict, key: str, kind, where: str, default: Any = ...):
    if key not in data:
        if default is ...:
            raise ConfigError(f"{where}: missing required field {key!r}")
        return default
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{where}: field {key!r} has type {type(value).__name__}")
    return value


def _unknown(data: dict, allowed: set, where: str) -> None:
    extra = sorted(set(data) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown fields {extra}")


def _param_list(values, dim: int, where: str) -> list[np.ndarray]:
    if not isinstance(values, list):
        raise ConfigError(f"{where} must be a list")
    try:
        return [as_state(np.atleast_1d(v), dim, where) for v in values]
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from None


@dataclass(frozen=True)
class BenchSolverSpec:
    kind: str
    tableau: str
    label: str


@dataclass
class BenchConfig:
    solvers: list[BenchSolverSpec]
    h_values: list[float]
    n_params: int = 10
    seed: int = 0
    param_interval: Optional[list] = None
    ood_interval: Optional[list] = None
    ood_fraction: float = 0.25
    timing_calls: int = 10**6


@dataclass
class RunConfig:
    """Validated run configuration.

    Attributes:
        run_id: name of the output subdirectory.
        output_dir: parent directory of run directories.
        system_name: registry name of the ODE system.
        tableau_name: registry name of the base scheme.
        h: coarse step size.
        h_ref: reference integrator step; ``h / h_ref`` must be integral.
        t_end: horizon; ``t_end / h`` must be integral.
        x0: initial condition.
        train_params: parameter vectors of the training set.
        validation_params: parameter vectors of the validation set.
        test_params: parameter vectors for simulation.
        hidden: hidden layer widths of the correction network.
        net_seed: initialization seed.
        training: optimizer and scheduler settings.
        hybrid: safeguard tolerances (``delta_max`` left unset).
        bench: benchmark settings, if any.
    """

    run_id: str
    output_dir: Path
    system_name: str
    tableau_name: str
    h: float
    h_ref: float
    t_end: float
    x0: np.ndarray
    train_params: list[np.ndarray]
    validation_params: list[np.ndarray]
    test_params: list[np.ndarray]
    hidden: list[int]
    net_seed: int
    training: TrainConfig
    hybrid: HybridConfig
    bench: Optional[BenchConfig] = None
    source: dict = field(default_factory=dict, repr=False)

    @property
    def system(self) -> OdeSystem:
        return get_system(self.system_name)

    @property
    def tableau(self):
        return get_tableau(self.tableau_name)

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.run_id

    @property
    def n_steps(self) -> int:
        return steps_between(self.t_end, self.h, "t_end")

    @property
    def layer_dims(self) -> list[int]:
        sys = self.system
        return [sys.state_dim + sys.param_dim, *self.hidden, sys.state_dim]

    def scheme(self) -> dict:
        """Identity of the learned scheme, stored next to a trained model."""
        return {
            "system": self.system_name,
            "tableau": self.tableau_name,
            "base_order": self.tableau.order,
            "h": self.h,
            "layer_dims": self.layer_dims,
        }

    @classmethod
    def from_dict(cls, data: dict, out: str | Path | None = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _unknown(data, _TOP_KEYS, "config")
        version = data.get("config_version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config: field 'config_version' must be {CONFIG_VERSION}, got {version!r}")

        run_id = _field(data, "run_id", str, "config")
        if not run_id or "/" in run_id or run_id in (".", ".."):
            raise ConfigError(f"config: field 'run_id' must be a plain directory name, got {run_id!r}")
        output_dir = Path(out) if out is not None else Path(_field(data, "output_dir", str, "config", "runs"))

        system_name = _field(data, "system", str, "config")
        if system_name not in SYSTEMS:
            raise ConfigError(f"config: field 'system' must be one of {sorted(SYSTEMS)}, got {system_name!r}")
        tableau_name = _field(data, "tableau", str, "config")
        if tableau_name not in TABLEAUX:
            raise ConfigError(f"config: field 'tableau' must be one of {sorted(TABLEAUX)}, got {tableau_name!r}")
        sys = get_system(system_name)

        h = _field(data, "h", float, "config")
        h_ref = _field(data, "h_ref", float, "config", 1e-3)
        t_end = _field(data, "t_end", float, "config")
        for key, val in (("h", h), ("h_ref", h_ref), ("t_end", t_end)):
            if not val > 0 or not np.isfinite(val):
                raise ConfigError(f"config: field {key!r} must be positive and finite, got {val!r}")
        try:
            steps_between(h, h_ref, "h")
        except ConfigError:
            raise ConfigError(f"config: fields 'h' ({h!r}) and 'h_ref' ({h_ref!r}): h must be an integer multiple of h_ref") from None
        try:
            steps_between(t_end, h, "t_end")
        except ConfigError:
            raise ConfigError(f"config: fields 't_end' ({t_end!r}) and 'h' ({h!r}): t_end must be an integer multiple of h") from None

        x0 = _param_list([data.get("x0", list(sys.default_x0))], sys.state_dim, "config field 'x0'")[0]

        params = _field(data, "params", dict, "config", {})
        _unknown(params, {"train", "validation", "test", "grid", "n_validation", "split_seed"}, "params")
        if "grid" in params:
            if "train" in params or "validation" in params:
                raise ConfigError("params: give either 'grid' or 'train'/'validation', not both")
            grid = _param_list(params["grid"], sys.param_dim, "params field 'grid'")
            n_val = _field(params, "n_validation", int, "params", 2)
            seed = _field(params, "split_seed", int, "params", 0)
            train_p, val_p = split_by_parameter(grid, n_val, seed)
        else:
            train_p = _param_list(params.get("train", []), sys.param_dim, "params field 'train'")
            val_p = _param_list(params.get("validation", []), sys.param_dim, "params field 'validation'")
        test_p = _param_list(params.get("test", []), sys.param_dim, "params field 'test'")
        if "simulate_params" in data:
            test_p = _param_list([data["simulate_params"]], sys.param_dim, "config field 'simulate_params'") + test_p

        net = _field(data, "network", dict, "config", {})
        _unknown(net, {"hidden", "seed"}, "network")
        hidden = net.get("hidden", [64, 64, 64])
        if not isinstance(hidden, list) or not all(isinstance(w, int) and w >= 1 for w in hidden):
            raise ConfigError(f"network: field 'hidden' must be a list of positive integers, got {hidden!r}")
        net_seed = _field(net, "seed", int, "network", 0)

        try:
            training = TrainConfig.from_dict(_field(data, "training", dict, "config", {}))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"training: {err}") from None

        hyb = _field(data, "hybrid", dict, "config", {})
        _unknown(hyb, {"atol", "rtol", "kappa", "norm_kind"}, "hybrid")
        try:
            hybrid = HybridConfig(**hyb)
        except TypeError as err:
            raise ConfigError(f"hybrid: {err}") from None

        bench = None
        if "bench" in data:
            bench = _bench_config(_field(data, "bench", dict, "config"), sys, t_end, h_ref)

        return cls(
            run_id=run_id,
            output_dir=output_dir,
            system_name=system_name,
            tableau_name=tableau_name,
            h=h,
            h_ref=h_ref,
            t_end=t_end,
            x0=x0,
            train_params=train_p,
            validation_params=val_p,
            test_params=test_p,
            hidden=hidden,
            net_seed=net_seed,
            training=training,
            hybrid=hybrid,
            bench=bench,
            source=data,
        )


def _bench_config(data: dict, sys: OdeSystem, t_end: float, h_ref: float) -> BenchConfig:
    _unknown(
        data,
        {"solvers", "h_values", "n_params", "seed", "param_interval", "ood_interval", "ood_fraction", "timing_calls"},
        "bench",
    )
    raw = _field(data, "solvers", list, "bench")
    if not raw:
        raise ConfigError("bench: field 'solvers' must not be empty")
    solvers = []
    for i, s in enumerate(raw):
        where = f"bench.solvers[{i}]"
        if not isinstance(s, dict):
            raise ConfigError(f"{where} must be an object")
        _unknown(s, {"kind", "tableau", "label"}, where)
        kind = _field(s, "kind", str, where)
        if kind not in SOLVER_KINDS:
            raise ConfigError(f"{where}: field 'kind' must be one of {list(SOLVER_KINDS)}, got {kind!r}")
        tab = _field(s, "tableau", str, where)
        if tab not in TABLEAUX:
            raise ConfigError(f"{where}: field 'tableau' must be one of {sorted(TABLEAUX)}, got {tab!r}")
        if kind == "hybrid":
            embedded_pair_for(tab)
        label = _field(s, "label", str, where, tab if kind == "plain" else f"{kind}-{tab}")
        solvers.append(BenchSolverSpec(kind, tab, label))
    labels = [s.label for s in solvers]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"bench: solver labels must be unique, got {labels}")

    h_values = _field(data, "h_values", list, "bench")
    if not h_values:
        raise ConfigError("bench: field 'h_values' must not be empty")
    for v in h_values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"bench: field 'h_values' holds a non-positive entry {v!r}")
        try:
            steps_between(t_end, v, "t_end")
            steps_between(v, h_ref, "h")
        except ConfigError as err:
            raise ConfigError(f"bench: field 'h_values': {err}") from None

    cfg = BenchConfig(
        solvers=solvers,
        h_values=[float(v) for v in h_values],
        n_params=_field(data, "n_params", int, "bench", 10),
        seed=_field(data, "seed", int, "bench", 0),
        param_interval=data.get("param_interval"),
        ood_interval=data.get("ood_interval"),
        ood_fraction=_field(data, "ood_fraction", float, "bench", 0.25),
        timing_calls=_field(data, "timing_calls", int, "bench", 10**6),
    )
    if cfg.n_params < 1:
        raise ConfigError(f"bench: field 'n_params' must be positive, got {cfg.n_params}")
    return cfg


def load_config(path: str | Path, out: str | Path | None = None) -> RunConfig:
    """Parse and validate a JSON config file.

    Raises:
        ConfigError: unreadable file, malformed JSON (with line and column),
            or an invalid field.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    return RunConfig.from_dict(data, out)
