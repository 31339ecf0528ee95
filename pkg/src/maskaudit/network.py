"""Small dense feed-forward networks with hand-written reverse-mode gradients.

The layer vocabulary is closed (Dense, Relu, Sigmoid, Staircase,
RampStaircase, Identity), so each layer carries its own forward and
vector-Jacobian product instead of going through a general autodiff tape.

Models are immutable. Evaluation happens in the model's precision (float64
by default, float32 to reproduce saturation/underflow effects); parameters
are stored in float64 and cast on use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import masking

__all__ = [
    "ShapeError",
    "DomainError",
    "TrainingError",
    "Dense",
    "Relu",
    "Sigmoid",
    "Staircase",
    "RampStaircase",
    "Identity",
    "Model",
    "Dataset",
    "ArchSpec",
    "forward",
    "forward_batch",
    "predict",
    "scalar_head_gradient",
    "head_gradients",
    "finite_diff_gradient",
    "make_blobs",
    "train_toy",
    "affine_map",
    "model_to_dict",
    "model_from_dict",
    "dumps",
    "loads",
]


class ShapeError(ValueError):
    """Input or parameter dimensions do not chain."""


class DomainError(ValueError):
    """Non-finite values where finite ones are required."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True, eq=False)
class Dense:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, ndmin=2)
        b = np.array(self.b, dtype=np.float64, ndmin=1)
        if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0] or 0 in W.shape:
            raise ShapeError(f"Dense shapes W{W.shape}, b{b.shape} do not match")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DomainError("Dense parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    def __eq__(self, other):
        return (
            isinstance(other, Dense)
            and np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
        )

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Sigmoid:
    gain: float = 1.0

    def __post_init__(self):
        masking._check_gain(self.gain)


@dataclass(frozen=True)
class Staircase:
    c: int = 255

    def __post_init__(self):
        masking._check_c(self.c)


@dataclass(frozen=True)
class RampStaircase:
    c: int = 255
    delta: float = 0.2

    def __post_init__(self):
        masking._check_c(self.c)
        masking._check_delta(self.delta)


@dataclass(frozen=True)
class Identity:
    pass


MASKING_LAYERS = (Staircase, RampStaircase)
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class Model:
    """Ordered layer list mapping ``input_dim`` reals to ``num_classes`` logits.

    ``backward_mode='bpda'`` makes Staircase/RampStaircase pass gradients
    through unchanged (identity) in the backward pass; the forward pass is
    never affected.
    """

    layers: tuple
    input_dim: int
    num_classes: int
    precision: str = "f64"
    backward_mode: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1:
            raise ShapeError("input_dim must be positive")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if self.precision not in _DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.backward_mode not in ("exact", "bpda"):
            raise ValueError(f"unknown backward_mode {self.backward_mode!r}")
        width = self.input_dim
        for layer in self.layers:
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise ShapeError(
                        f"Dense expects {layer.in_dim} inputs but receives {width}"
                    )
                width = layer.out_dim
            elif not isinstance(layer, (Relu, Sigmoid, Staircase, RampStaircase, Identity)):
                raise TypeError(f"unsupported layer {layer!r}")
        if width != self.num_classes:
            raise ShapeError(f"model maps to {width} outputs, not {self.num_classes}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def with_mode(self, backward_mode):
        return replace(self, backward_mode=backward_mode)

    def with_precision(self, precision):
        return replace(self, precision=precision)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ShapeError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.max() >= self.num_classes or self.labels.min() < 0):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)


# --------------------------------------------------------------------------
# evaluation


def _check_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of dimension {model.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("input contains NaN or Inf")
    return X.astype(model.dtype, copy=False)


def _layer_forward(layer, a, dtype):
    if isinstance(layer, Dense):
        return a @ layer.W.T.astype(dtype) + layer.b.astype(dtype)
    if isinstance(layer, Relu):
        return np.maximum(a, dtype(0.0))
    if isinstance(layer, Sigmoid):
        return masking._sigmoid(dtype(layer.gain) * a)
    if isinstance(layer, Staircase):
        return np.ceil(layer.c * a) / dtype(layer.c)
    if isinstance(layer, RampStaircase):
        return masking.ramp_staircase_eval(a, layer.c, layer.delta).astype(dtype, copy=False)
    return a


def _forward_cache(model, X):
    acts = [X]
    for layer in model.layers:
        acts.append(_layer_forward(layer, acts[-1], model.dtype))
    return acts


def _layer_vjp(layer, a_in, a_out, g, model):
    """Pull ``g`` (gradient w.r.t. the layer output) back to the layer input."""
    dtype = model.dtype
    if isinstance(layer, Dense):
        return g @ layer.W.astype(dtype)
    if isinstance(layer, Relu):
        return g * (a_in > 0)
    if isinstance(layer, Sigmoid):
        return g * (dtype(layer.gain) * a_out * (dtype(1.0) - a_out))
    if isinstance(layer, MASKING_LAYERS):
        if model.backward_mode == "bpda":
            return g
        if isinstance(layer, Staircase):
            return np.zeros_like(g)
        return g * masking.ramp_staircase_grad(a_in, layer.c, layer.delta).astype(dtype, copy=False)
    return g


def _backward(model, acts, g_out, param_grads=False):
    g = g_out
    grads = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if param_grads and isinstance(layer, Dense):
            grads[idx] = (g.T @ acts[idx], g.sum(axis=0))
        g = _layer_vjp(layer, acts[idx], acts[idx + 1], g, model)
    return (g, grads) if param_grads else g


def forward_batch(model, X):
    """Logits for each row of ``X`` (shape ``(n, input_dim)``)."""
    return _forward_cache(model, _check_batch(model, X))[-1]


def forward(model, x):
    """Logits of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def predict(model, X):
    """Arg-max class per row (ties resolve to the lowest index)."""
    return np.argmax(forward_batch(model, np.atleast_2d(X)), axis=1)


def _check_heads(model, i, j):
    if i == j:
        raise ValueError("i and j must differ")
    for k in (i, j):
        if not 0 <= k < model.num_classes:
            raise ValueError(f"class index {k} out of range")


def head_gradients(model, X, i, j):
    """Rows of ``grad_x (f_i - f_j)`` for each row of ``X``."""
    _check_heads(model, i, j)
    X = _check_batch(model, X)
    acts = _forward_cache(model, X)
    g = np.zeros_like(acts[-1])
    g[:, i] = 1.0
    g[:, j] = -1.0
    return _backward(model, acts, g)


def scalar_head_gradient(model, x, i, j):
    """``grad_x (f_i(x) - f_j(x))`` by reverse mode."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return head_gradients(model, x[None, :], i, j)[0]


def finite_diff_gradient(model, x, i, j, step=1e-5):
    """Central-difference approximation of :func:`scalar_head_gradient`."""
    if not step > 0:
        raise ValueError("step must be positive")
    _check_heads(model, i, j)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    E = np.eye(d) * step
    out = forward_batch(model, np.concatenate([x + E, x - E]))
    head = (out[:, i] - out[:, j]).astype(np.float64)
    return (head[:d] - head[d:]) / (2.0 * step)


def affine_map(model):
    """Collapse a Dense/Identity-only model into ``(A, c)`` with logits ``A x + c``.

    Returns None when the model contains any other layer.
    """
    A = np.eye(model.input_dim)
    c = np.zeros(model.input_dim)
    for layer in model.layers:
        if isinstance(layer, Dense):
            A = layer.W @ A
            c = layer.W @ c + layer.b
        elif not isinstance(layer, Identity):
            return None
    return A, c


# --------------------------------------------------------------------------
# data and training


def _class_centers(d, num_classes, separation):
    centers = np.zeros((num_classes, d))
    if d == 1:
        centers[:, 0] = (np.arange(num_classes) - (num_classes - 1) / 2.0) * separation
    else:
        # adjacent centers on a circle are `separation` apart
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blobs(seed, n_per_class, d, num_classes, separation, scale=1.0, center=0.0):
    """Isotropic Gaussian blobs around deterministic class centers.

    Centers sit on a circle in the first two coordinates (on a line when
    ``d == 1``), shifted by ``center`` in every coordinate; neighbouring
    centers are ``separation`` apart. ``scale`` is the per-coordinate
    standard deviation.
    """
    if d < 1 or num_classes < 2 or n_per_class < 0:
        raise ValueError("need d >= 1, num_classes >= 2, n_per_class >= 0")
    if not separation > 0 or not scale > 0:
        raise ValueError("separation and scale must be positive")
    rng = np.random.default_rng(seed)
    centers = _class_centers(d, num_classes, separation) + center
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = centers[labels] + scale * rng.standard_normal((labels.size, d))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], num_classes, seed)


@dataclass(frozen=True)
class ArchSpec:
    """Hidden widths and activation; ``hidden=()`` is logistic regression."""

    hidden: tuple = ()
    activation: str = "relu"
    gain: float = 1.0

    def make_activation(self):
        if self.activation == "relu":
            return Relu()
        if self.activation == "sigmoid":
            return Sigmoid(self.gain)
        raise ValueError(f"unknown activation {self.activation!r}")


def _init_model(arch, d, num_classes, rng):
    widths = [d, *arch.hidden, num_classes]
    layers = []
    for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        W = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
        layers.append(Dense(W, np.zeros(n_out)))
        if k < len(widths) - 2:
            layers.append(arch.make_activation())
    return Model(tuple(layers), d, num_classes)


def train_toy(arch, dataset, lr=0.1, epochs=100, seed=0, batch_size=32):
    """Minibatch SGD on softmax cross-entropy. Deterministic for a fixed seed."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if not lr > 0:
        raise ValueError("lr must be positive")
    rng = np.random.default_rng(seed)
    model = _init_model(arch, dataset.inputs.shape[1], dataset.num_classes, rng)
    params = [[l.W.copy(), l.b.copy()] if isinstance(l, Dense) else None for l in model.layers]
    n = len(dataset)
    X, y = dataset.inputs, dataset.labels

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            acts = _forward_cache(model, X[idx])
            z = acts[-1] - acts[-1].max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(idx.size), y[idx]].mean()
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss}")
            g = np.exp(logp)
            g[np.arange(idx.size), y[idx]] -= 1.0
            _, grads = _backward(model, acts, g / idx.size, param_grads=True)
            for p, gr in zip(params, grads):
                if p is not None:
                    p[0] -= lr * gr[0]
                    p[1] -= lr * gr[1]
            model = replace(
                model,
                layers=tuple(
                    Dense(p[0].copy(), p[1].copy()) if p is not None else l
                    for p, l in zip(params, model.layers)
                ),
            )
    return model


# --------------------------------------------------------------------------
# serialization
#
# Floats are written with Python's shortest round-trip repr, which parses
# back to the identical float64.

_LAYER_TYPES = {
    "dense": Dense,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "staircase": Staircase,
    "ramp_staircase": RampStaircase,
    "identity": Identity,
}


def _layer_to_dict(layer):
    if isinstance(layer, Dense):
        return {"type": "dense", "W": layer.W.tolist(), "b": layer.b.tolist()}
    if isinstance(layer, Sigmoid):
        return {"type": "sigmoid", "gain": layer.gain}
    if isinstance(layer, Staircase):
        return {"type": "staircase", "c": layer.c}
    if isinstance(layer, RampStaircase):
        return {"type": "ramp_staircase", "c": layer.c, "delta": layer.delta}
    if isinstance(layer, Relu):
        return {"type": "relu"}
    return {"type": "identity"}


def model_to_dict(model):
    return {
        "precision": model.precision,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "layers": [_layer_to_dict(l) for l in model.layers],
    }


def model_from_dict(doc):
    try:
        layers = []
        for spec in doc["layers"]:
            spec = dict(spec)
            cls = _LAYER_TYPES[spec.pop("type")]
            layers.append(cls(**spec))
        return Model(
            tuple(layers),
            int(doc["input_dim"]),
            int(doc["num_classes"]),
            precision=doc.get("precision", "f64"),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc!r}") from exc


def dumps(model):
    return json.dumps(model_to_dict(model), indent=1)


def loads(text):
    return model_from_dict(json.loads(text))
