"""Multinomial logistic regression and a one-hidden-layer tanh MLP.

Parameters live in one flat float64 vector.  Layout, in order:

* logreg: ``W`` (n_classes x dim, row-major), ``b`` (n_classes)
* mlp:    ``W1`` (hidden x dim), ``b1`` (hidden), ``W2`` (n_classes x hidden), ``b2``

Softmax always subtracts the row max before exponentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ParameterError
from .numerics import SeededRng


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logreg"
    dim: int = 2
    n_classes: int = 2
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.dim < 1 or self.n_classes < 1:
            raise ParameterError("dim and n_classes must be >= 1")
        if self.kind == "mlp" and self.hidden < 1:
            raise ParameterError("mlp needs hidden >= 1")

    @property
    def layers(self):
        """(fan_out, fan_in) per dense layer."""
        if self.kind == "logreg":
            return [(self.n_classes, self.dim)]
        return [(self.hidden, self.dim), (self.n_classes, self.hidden)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layers)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ParameterError("batch must not be empty")

    def __len__(self):
        return len(self.labels)


def unpack(spec: ModelSpec, theta) -> list:
    """Split ``theta`` into ``[(W, b), ...]`` views, one pair per layer."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ParameterError(f"theta has shape {theta.shape}, expected ({spec.n_params},)")
    out, pos = [], 0
    for fan_out, fan_in in spec.layers:
        w = theta[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        out.append((w, theta[pos : pos + fan_out]))
        pos += fan_out
    return out


def init_params(spec: ModelSpec, seed: int, stream: int = 0) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = SeededRng(seed, stream)
    parts = []
    for fan_out, fan_in in spec.layers:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-a, a, fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def one_hot(labels, n_classes: int) -> np.ndarray:
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return y


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _forward(spec, theta, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    layers = unpack(spec, theta)
    if x.shape[1] != spec.dim:
        raise ParameterError(f"features have {x.shape[1]} columns, model expects {spec.dim}")
    if spec.kind == "logreg":
        (w, b), = layers
        return x @ w.T + b, None
    (w1, b1), (w2, b2) = layers
    h = np.tanh(x @ w1.T + b1)
    return h @ w2.T + b2, h


def logits(spec: ModelSpec, theta, features) -> np.ndarray:
    return _forward(spec, theta, features)[0]


def predict_proba(spec: ModelSpec, theta, features) -> np.ndarray:
    return softmax(logits(spec, theta, features))


def soft_loss(spec, theta, x, y_soft) -> float:
    """Mean cross-entropy against (possibly soft) target rows ``y_soft``."""
    z, _ = _forward(spec, theta, x)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    return float(-(y_soft * log_softmax(z)).sum() / z.shape[0])


def soft_grads(spec, theta, x, y_soft):
    """Gradients of :func:`soft_loss` w.r.t. theta (flat) and the inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, h = _forward(spec, theta, x)
    dz = (softmax(z) - y_soft) / x.shape[0]
    layers = unpack(spec, theta)
    if spec.kind == "logreg":
        (w, _), = layers
        g = np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
        return g, dz @ w
    (w1, _), (w2, _) = layers
    da = (dz @ w2) * (1.0 - h * h)
    g = np.concatenate(
        [(da.T @ x).ravel(), da.sum(axis=0), (dz.T @ h).ravel(), dz.sum(axis=0)]
    )
    return g, da @ w1


def forward_loss(spec: ModelSpec, theta, batch) -> float:
    return soft_loss(spec, theta, batch.features, one_hot(batch.labels, spec.n_classes))


def grad_weights(spec: ModelSpec, theta, batch) -> np.ndarray:
    return soft_grads(spec, theta, batch.features, one_hot(batch.labels, spec.n_classes))[0]


def grad_inputs(spec: ModelSpec, theta, features, labels) -> np.ndarray:
    """d(mean loss)/d(features), same shape as ``features``."""
    return soft_grads(spec, theta, features, one_hot(labels, spec.n_classes))[1]


def predict(spec: ModelSpec, theta, features) -> np.ndarray:
    # np.argmax resolves ties to the lowest class index
    return np.argmax(logits(spec, theta, features), axis=1)


def accuracy(spec: ModelSpec, theta, dataset) -> float:
    if not np.all(np.isfinite(theta)):
        return float("nan")
    return float(np.mean(predict(spec, theta, dataset.features) == dataset.labels))
