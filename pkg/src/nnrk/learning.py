"""Training data of scaled local errors and the regression loop that fits them.

For a base scheme of order ``p`` and step ``h`` the target at a reference
state ``x_k = x_ref(k h)`` is

    (x_ref((k + 1) h) - step_h(x_k)) / h**(p + 1)

which tends to the leading local-error coefficient as ``h -> 0``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, TrainingError
from .mlp import AdamW, LrPlateau, Mlp
from .rk import ButcherTableau, format_float, reference_integrate, rk_step, steps_between
from .systems import OdeSystem, as_params, as_state


@dataclass(frozen=True)
class TrainingSample:
    k: int
    state: np.ndarray
    params: np.ndarray
    target: np.ndarray


@dataclass
class Dataset:
    """Local-error samples for one system, base scheme and step size.

    Rows are sorted by (parameter index, step index ``k``). ``states``,
    ``params`` and ``targets`` are 2-D arrays with one row per sample.
    """

    k: np.ndarray
    states: np.ndarray
    params: np.ndarray
    targets: np.ndarray
    h: float
    base_order: int
    system: str
    tableau: str
    param_grid: list[list[float]]
    x0: list[float] = field(default_factory=list)
    t_end: float | None = None
    h_ref: float | None = None

    def __post_init__(self):
        n = len(self.k)
        if n == 0:
            raise ConfigError("dataset is empty")
        for name in ("states", "params", "targets"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(n, -1)
            setattr(self, name, arr)
        if self.targets.shape != self.states.shape:
            raise ConfigError("targets and states must share the state dimension")
        if not np.all(np.isfinite(self.targets)):
            raise ConfigError("dataset contains non-finite targets")

    def __len__(self) -> int:
        return len(self.k)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def param_dim(self) -> int:
        return self.params.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Network inputs: state concatenated with parameters."""
        return np.concatenate((self.states, self.params), axis=1)

    def samples(self) -> Iterator[TrainingSample]:
        for i in range(len(self)):
            yield TrainingSample(int(self.k[i]), self.states[i], self.params[i], self.targets[i])

    def metadata(self) -> dict:
        return {
            "h": self.h,
            "base_order": self.base_order,
            "system": self.system,
            "tableau": self.tableau,
            "param_grid": self.param_grid,
            "x0": self.x0,
            "t_end": self.t_end,
            "h_ref": self.h_ref,
            "n_samples": len(self),
            "state_dim": self.state_dim,
            "param_dim": self.param_dim,
        }


def build_dataset(
    sys: OdeSystem,
    tab: ButcherTableau,
    param_grid: Sequence,
    x0,
    h: float,
    t_end: float,
    h_ref: float,
) -> Dataset:
    """Sample scaled local errors of ``tab`` along reference trajectories.

    One reference trajectory from ``x0`` is integrated per parameter vector
    in ``param_grid`` (all of them in a single batched sweep).

    Raises:
        ConfigError: empty grid, or ``h``/``t_end`` off the reference grid.
        IntegrationError: the reference integration diverged.
    """
    if len(param_grid) == 0:
        raise ConfigError("parameter grid is empty")
    grid = np.array([as_params(np.atleast_1d(p), sys.param_dim) for p in param_grid])
    grid = grid.reshape(len(param_grid), sys.param_dim)
    x0 = as_state(x0, sys.state_dim, "x0")
    n_k = steps_between(t_end, h, "t_end")
    steps_between(h, h_ref, "h")

    x0_batch = np.broadcast_to(x0, (len(grid), sys.state_dim)).copy()
    ref = reference_integrate(sys, x0_batch, grid, h_ref, t_end, h_out=h).states
    # ref: (n_k + 1, n_params, state_dim) -> rows ordered by (param, k)
    starts = ref[:-1].transpose(1, 0, 2).reshape(-1, sys.state_dim)
    ends = ref[1:].transpose(1, 0, 2).reshape(-1, sys.state_dim)
    params = np.repeat(grid, n_k, axis=0)
    stepped = rk_step(sys, tab, starts, params, h, embedded=False).next
    targets = (ends - stepped) / h ** (tab.order + 1)
    k = np.tile(np.arange(n_k), len(grid))
    return Dataset(
        k=k,
        states=starts,
        params=params,
        targets=targets,
        h=float(h),
        base_order=tab.order,
        system=sys.name,
        tableau=tab.name,
        param_grid=grid.tolist(),
        x0=x0.tolist(),
        t_end=float(t_end),
        h_ref=float(h_ref),
    )


def split_by_parameter(values: Sequence, n_validation: int = 2, seed: int = 0):
    """Hold out ``n_validation`` parameter values for validation.

    Returns ``(train, validation)`` lists, each in the original order.
    """
    values = list(values)
    if len(values) < 3:
        raise ConfigError(f"need at least 3 parameter values to split, got {len(values)}")
    if not 1 <= n_validation < len(values):
        raise ConfigError(f"n_validation must be in [1, {len(values) - 1}], got {n_validation}")
    keys = [tuple(np.atleast_1d(np.asarray(v, dtype=float)).tolist()) for v in values]
    if len(set(keys)) != len(keys):
        raise ConfigError("parameter values must be distinct")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(len(values), size=n_validation, replace=False).tolist())
    train = [v for i, v in enumerate(values) if i not in held]
    val = [v for i, v in enumerate(values) if i in held]
    return train, val


@dataclass
class TrainConfig:
    """Mini-batch training settings; the defaults are config defaults, not tuned values."""

    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    net: Mlp
    history: list[dict]

    @property
    def final_val_loss(self) -> float:
        return self.history[-1]["val_loss"]


def _check_compatible(net: Mlp, ds: Dataset) -> None:
    if ds.state_dim + ds.param_dim != net.n_in or ds.state_dim != net.n_out:
        raise ConfigError(
            f"network dims {net.layer_dims} do not match dataset "
            f"(state_dim={ds.state_dim}, param_dim={ds.param_dim})"
        )


def fit_scaling(net: Mlp, ds: Dataset) -> None:
    """Fix the network's input/output min-max layers from ``ds``."""
    x = ds.inputs
    net.set_input_scaling(x.min(axis=0), x.max(axis=0))
    net.set_output_scaling(ds.targets.min(axis=0), ds.targets.max(axis=0))


def evaluate_loss(net: Mlp, ds: Dataset) -> float:
    """Mean squared error in the normalized target space, averaged over components."""
    pred = net.core_forward(net.scale_input(ds.inputs))
    resid = pred - net.scale_target(ds.targets)
    return float(np.mean(resid * resid))


def train(net: Mlp, train_set: Dataset, val_set: Dataset, cfg: TrainConfig | None = None) -> TrainResult:
    """Fit ``net`` to the scaled local errors of ``train_set``.

    The scaling layers are fitted on ``train_set`` before the first epoch
    and stay frozen. Each epoch draws a seeded permutation, runs AdamW over
    mini-batches and lets the plateau scheduler react to the validation
    loss. ``net`` is modified in place and also returned.

    Raises:
        ConfigError: the datasets do not match the network dimensions.
        TrainingError: a batch loss became non-finite.
    """
    cfg = cfg or TrainConfig()
    _check_compatible(net, train_set)
    _check_compatible(net, val_set)
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")

    fit_scaling(net, train_set)
    xs = net.scale_input(train_set.inputs)
    ts = net.scale_target(train_set.targets)
    n, n_out = ts.shape

    opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    sched = LrPlateau(cfg.patience, cfg.factor, cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            out, cache = net.core_forward_cache(xs[idx])
            resid = out - ts[idx]
            loss = float(np.mean(resid * resid))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            grads = net.core_backward(cache, (2.0 / resid.size) * resid)
            opt.step(params, grads)
        train_loss = evaluate_loss(net, train_set)
        val_loss = evaluate_loss(net, val_set)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        opt.lr = sched.update(val_loss, opt.lr)
    return TrainResult(net, history)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the sample CSV and its JSON sidecar (same stem, ``.json``)."""
    path = Path(path)
    header = (
        ["k"]
        + [f"p_{j + 1}" for j in range(ds.param_dim)]
        + [f"x_{i + 1}" for i in range(ds.state_dim)]
        + [f"target_{i + 1}" for i in range(ds.state_dim)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            row = [str(int(ds.k[i]))]
            row += [format_float(v) for v in ds.params[i]]
            row += [format_float(v) for v in ds.states[i]]
            row += [format_float(v) for v in ds.targets[i]]
            writer.writerow(row)
    _sidecar(path).write_text(json.dumps(ds.metadata(), indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise ConfigError(f"dataset sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    n, m = meta["state_dim"], meta["param_dim"]
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 1 + m + 2 * n:
        raise ConfigError(f"{path}: expected {1 + m + 2 * n} columns, found {data.shape[1]}")
    return Dataset(
        k=data[:, 0].astype(int),
        params=data[:, 1 : 1 + m],
        states=data[:, 1 + m : 1 + m + n],
        targets=data[:, 1 + m + n :],
        h=meta["h"],
        base_order=meta["base_order"],
        system=meta["system"],
        tableau=meta["tableau"],
        param_grid=meta["param_grid"],
        x0=meta.get("x0", []),
        t_end=meta.get("t_end"),
        h_ref=meta.get("h_ref"),
    )


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow(
                [row["epoch"], format_float(row["train_loss"]), format_float(row["val_loss"]), format_float(row["lr"])]
            )
