"""Convex local models and the local gradient-descent step.

Parameters are flat float64 vectors. For ``linear-mse`` the vector has one
entry per feature (bias last); for ``softmax-xent`` it is the row-major
flattening of a ``width x n_classes`` weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from erasure_fl.data import CLASSIFICATION, REGRESSION, LocalDataset
from erasure_fl.errors import DimensionError, DivergenceError, InvalidConfigError

LINEAR_MSE = "linear-mse"
SOFTMAX_XENT = "softmax-xent"
MODEL_KINDS = (LINEAR_MSE, SOFTMAX_XENT)


@dataclass(frozen=True)
class LossSpec:
    kind: str = LINEAR_MSE
    reg: float = 0.0
    n_classes: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise InvalidConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if not self.reg >= 0:
            raise InvalidConfigError(f"regularization must be >= 0, got {self.reg}")
        if self.kind == SOFTMAX_XENT and (self.n_classes is None or self.n_classes < 2):
            raise InvalidConfigError("softmax-xent needs n_classes >= 2")

    def param_size(self, width: int) -> int:
        return width if self.kind == LINEAR_MSE else width * int(self.n_classes)

    def zeros(self, width: int) -> np.ndarray:
        return np.zeros(self.param_size(width))


def _check(w: np.ndarray, ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size != spec.param_size(ds.width):
        raise DimensionError(
            f"parameter length {w.size} does not match {spec.kind} on width {ds.width}"
            f" (expected {spec.param_size(ds.width)})"
        )
    expected_task = REGRESSION if spec.kind == LINEAR_MSE else CLASSIFICATION
    if ds.task != expected_task:
        raise DimensionError(f"{spec.kind} needs a {expected_task} dataset, got {ds.task}")
    return w


def _softmax_parts(W: np.ndarray, ds: LocalDataset) -> tuple[np.ndarray, np.ndarray]:
    logits = ds.features @ W
    logits = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1))
    log_probs = logits - log_norm[:, None]
    return log_probs, ds.targets.astype(int)


def local_loss(w: np.ndarray, ds: LocalDataset, spec: LossSpec) -> float:
    """Per-device loss.

    linear-mse: ``sum((y - X w)**2) / (2 D_i) + reg/2 * |w|**2``.
    softmax-xent: mean negative log-likelihood ``+ reg/2 * |w|**2``.
    """
    w = _check(w, ds, spec)
    penalty = 0.5 * spec.reg * float(w @ w)
    if spec.kind == LINEAR_MSE:
        r = ds.targets - ds.features @ w
        return float(r @ r) / (2.0 * ds.size) + penalty
    log_probs, y = _softmax_parts(w.reshape(ds.width, spec.n_classes), ds)
    return float(-log_probs[np.arange(ds.size), y].mean()) + penalty


def local_gradient(w: np.ndarray, ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    w = _check(w, ds, spec)
    X = ds.features
    if spec.kind == LINEAR_MSE:
        return X.T @ (X @ w - ds.targets) / ds.size + spec.reg * w
    W = w.reshape(ds.width, spec.n_classes)
    log_probs, y = _softmax_parts(W, ds)
    resid = np.exp(log_probs)
    resid[np.arange(ds.size), y] -= 1.0
    G = X.T @ resid / ds.size + spec.reg * W
    return G.reshape(-1)


def local_update(
    w_global: np.ndarray,
    ds: LocalDataset,
    spec: LossSpec,
    eta: float,
    tau: int,
) -> np.ndarray:
    """Run exactly ``tau`` full-batch GD steps ``w <- w - eta * grad`` from
    ``w_global``. No early stopping.

    Raises DivergenceError (carrying the 1-based step index) as soon as an
    iterate is non-finite.
    """
    if not eta > 0:
        raise InvalidConfigError(f"learning rate must be > 0, got {eta}")
    if tau < 0:
        raise InvalidConfigError(f"local iteration count must be >= 0, got {tau}")
    w = np.array(w_global, dtype=float)
    _check(w, ds, spec)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, tau + 1):
            w = w - eta * local_gradient(w, ds, spec)
            if not np.all(np.isfinite(w)):
                raise DivergenceError(step)
    return w


def predict_classes(w: np.ndarray, ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    w = _check(w, ds, spec)
    return np.argmax(ds.features @ w.reshape(ds.width, spec.n_classes), axis=1)


def accuracy(w: np.ndarray, ds: LocalDataset, spec: LossSpec) -> float:
    return float(np.mean(predict_classes(w, ds, spec) == ds.targets.astype(int)))


def mse(w: np.ndarray, ds: LocalDataset) -> float:
    """Plain mean squared error of a linear predictor."""
    r = ds.targets - ds.features @ np.asarray(w, dtype=float)
    return float(r @ r) / ds.size

