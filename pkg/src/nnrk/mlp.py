"""Multilayer perceptron with ReLU hidden layers, written directly in numpy.

The network is ``output_scale(T_L relu(... relu(T_1(input_scale(x)))))``:
affine layers ``T_l(a) = W_l a + b_l`` with ReLU between them and no
activation after the last one. The two scaling layers are fixed min-max
maps fitted on training data; they are never trained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelFormatError

MODEL_FORMAT_VERSION = 1


def _span(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # Constant components keep gain 1 so nothing is divided by zero.
    span = hi - lo
    return np.where(span > 0, span, 1.0)


@dataclass
class Mlp:
    """Feed-forward ReLU network with fixed affine input/output scaling.

    Attributes:
        layer_dims: ``[n_in, n_1, ..., n_out]``.
        weights: ``weights[l]`` has shape ``(layer_dims[l+1], layer_dims[l])``.
        biases: ``biases[l]`` has length ``layer_dims[l+1]``.
        in_min, in_max: raw input range mapped onto ``[0, 1]``.
        out_min, out_max: raw output range; the last affine layer's output
            ``y`` is mapped back to ``out_min + y * (out_max - out_min)``.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_min: np.ndarray = field(default=None)
    in_max: np.ndarray = field(default=None)
    out_min: np.ndarray = field(default=None)
    out_max: np.ndarray = field(default=None)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        n_in, n_out = self.layer_dims[0], self.layer_dims[-1]
        if self.in_min is None:
            self.in_min, self.in_max = np.zeros(n_in), np.ones(n_in)
        if self.out_min is None:
            self.out_min, self.out_max = np.zeros(n_out), np.ones(n_out)
        for name in ("in_min", "in_max", "out_min", "out_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[l + 1], self.layer_dims[l])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {l}: expected W{shape} and b({shape[0]},)")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in the order ``W_1, b_1, W_2, b_2, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_input_scaling(self, lo, hi) -> None:
        self.in_min = np.asarray(lo, dtype=np.float64).copy()
        self.in_max = np.asarray(hi, dtype=np.float64).copy()

    def set_output_scaling(self, lo, hi) -> None:
        self.out_min = np.asarray(lo, dtype=np.float64).copy()
        self.out_max = np.asarray(hi, dtype=np.float64).copy()

    def scale_input(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.in_min) / _span(self.in_min, self.in_max)

    def scale_target(self, raw: np.ndarray) -> np.ndarray:
        """Map a raw target into the normalized space the core network predicts."""
        return (raw - self.out_min) / _span(self.out_min, self.out_max)

    def unscale_output(self, y: np.ndarray) -> np.ndarray:
        return self.out_min + y * _span(self.out_min, self.out_max)

    def core_forward(self, a: np.ndarray) -> np.ndarray:
        """Affine/ReLU stack on already-scaled inputs, without output scaling."""
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if l < last:
                a = np.maximum(a, 0.0)
        return a

    def forward(self, inp: np.ndarray) -> np.ndarray:
        """Evaluate the network on one input vector or a ``(batch, n_in)`` array."""
        inp = np.asarray(inp, dtype=np.float64)
        if inp.shape[-1] != self.n_in:
            raise ValueError(f"input has length {inp.shape[-1]}, network expects {self.n_in}")
        return self.unscale_output(self.core_forward(self.scale_input(inp)))

    def __call__(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Evaluate on state ``x`` concatenated with parameters ``p``."""
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        p = np.broadcast_to(p, x.shape[:-1] + p.shape[-1:])
        return self.forward(np.concatenate((x, p), axis=-1))

    def core_forward_cache(self, a: np.ndarray):
        """Like :meth:`core_forward` but also returns layer inputs and pre-activations."""
        inputs, pre = [], []
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if l < last else z
        return a, (inputs, pre)

    def core_backward(self, cache, upstream: np.ndarray) -> list[np.ndarray]:
        """Reverse-mode pass through the affine/ReLU stack.

        ``upstream`` is the gradient with respect to the core output (batch
        rows are summed). Returns gradients aligned with :meth:`parameters`.
        ReLU'(0) is taken as 0.
        """
        inputs, pre = cache
        g = np.atleast_2d(upstream)
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)
        for l in range(self.n_layers - 1, -1, -1):
            a_prev = np.atleast_2d(inputs[l])
            grads[2 * l] = g.T @ a_prev
            grads[2 * l + 1] = g.sum(axis=0)
            if l > 0:
                g = (g @ self.weights[l]) * (np.atleast_2d(pre[l - 1]) > 0.0)
        return grads

    def backward(self, inp: np.ndarray, upstream: np.ndarray) -> list[np.ndarray]:
        """Gradient of ``sum(upstream * forward(inp))`` with respect to every W and b.

        The scaling layers are fixed and receive no gradient.
        """
        inp = np.asarray(inp, dtype=np.float64)
        _, cache = self.core_forward_cache(self.scale_input(inp))
        g = np.asarray(upstream, dtype=np.float64) * _span(self.out_min, self.out_max)
        return self.core_backward(cache, g)

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.in_min.copy(),
            self.in_max.copy(),
            self.out_min.copy(),
            self.out_max.copy(),
        )

    def lipschitz_bound(self) -> float:
        """Upper bound on the Lipschitz constant in the max-norm.

        Product of the induced infinity norms (max absolute row sum) of all
        layers, including the fixed scaling gains; ReLU is 1-Lipschitz.
        """
        bound = float(np.max(1.0 / _span(self.in_min, self.in_max)))
        for w in self.weights:
            bound *= float(np.max(np.sum(np.abs(w), axis=1)))
        return bound * float(np.max(_span(self.out_min, self.out_max)))


def mlp_new(layer_dims: Sequence[int], seed: int = 0) -> Mlp:
    """He-uniform initialized network with zero biases and identity scaling."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer sizes must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_prev, n_next in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / n_prev)
        weights.append(rng.uniform(-bound, bound, size=(n_next, n_prev)))
        biases.append(np.zeros(n_next))
    return Mlp(dims, weights, biases)


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)``
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: list = field(default_factory=list, repr=False)
    v: list = field(default_factory=list, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


@dataclass
class LrPlateau:
    """Reduce the learning rate once validation loss stops improving.

    After ``patience`` consecutive epochs without a strict improvement the
    rate is multiplied by ``factor`` (not below ``min_lr``) and the counter
    restarts.
    """

    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def update(self, val_loss: float, lr: float) -> float:
        if not math.isfinite(val_loss):
            raise ValueError(f"validation loss is not finite: {val_loss}")
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def model_to_dict(net: Mlp) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "weights": [w.ravel(order="C").tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "input_scale": {"min": net.in_min.tolist(), "max": net.in_max.tolist()},
        "output_scale": {"min": net.out_min.tolist(), "max": net.out_max.tolist()},
    }


def _float_list(obj, n: int, what: str) -> np.ndarray:
    if not isinstance(obj, list) or len(obj) != n:
        raise ModelFormatError(f"{what}: expected a list of {n} numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
        raise ModelFormatError(f"{what}: entries must be numbers")
    arr = np.array(obj, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{what}: non-finite value")
    return arr


def model_from_dict(data: dict) -> Mlp:
    """Validate and decode a model document (see :func:`save_model`)."""
    if not isinstance(data, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = data.get("version")
    if version not in (MODEL_FORMAT_VERSION, str(MODEL_FORMAT_VERSION)) or isinstance(version, bool):
        raise ModelFormatError(f"unsupported model version {version!r}")
    for key in ("layer_dims", "weights", "biases", "input_scale", "output_scale"):
        if key not in data:
            raise ModelFormatError(f"missing field {key!r}")
    dims = data["layer_dims"]
    if (
        not isinstance(dims, list)
        or len(dims) < 2
        or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims)
    ):
        raise ModelFormatError("layer_dims must be a list of positive integers")
    n_layers = len(dims) - 1
    if not isinstance(data["weights"], list) or len(data["weights"]) != n_layers:
        raise ModelFormatError(f"weights: expected {n_layers} layers")
    if not isinstance(data["biases"], list) or len(data["biases"]) != n_layers:
        raise ModelFormatError(f"biases: expected {n_layers} layers")
    weights, biases = [], []
    for l in range(n_layers):
        w = _float_list(data["weights"][l], dims[l + 1] * dims[l], f"weights[{l}]")
        weights.append(w.reshape(dims[l + 1], dims[l]))
        biases.append(_float_list(data["biases"][l], dims[l + 1], f"biases[{l}]"))
    scales = []
    for key, n in (("input_scale", dims[0]), ("output_scale", dims[-1])):
        sc = data[key]
        if not isinstance(sc, dict):
            raise ModelFormatError(f"{key} must be an object with min and max")
        scales.append(_float_list(sc.get("min"), n, f"{key}.min"))
        scales.append(_float_list(sc.get("max"), n, f"{key}.max"))
    return Mlp(dims, weights, biases, *scales)


def save_model(net: Mlp, path: str | Path) -> None:
    """Write the versioned JSON model file; floats round-trip exactly."""
    text = json.dumps(model_to_dict(net), allow_nan=False)
    Path(path).write_text(text + "\n")


def load_model(path: str | Path) -> Mlp:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"{path}: invalid JSON ({err})") from err
    return model_from_dict(data)
