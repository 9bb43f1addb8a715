"""Parameter vectors, local datasets, loss objectives and local SGD.

Parameters are flat ``float64`` numpy vectors. Each loss kind knows how to
unpack that vector into its weights:

* ``quadratic-synthetic``: ``0.5 * (a @ theta - b) ** 2`` (least squares with a
  closed-form minimizer),
* ``squared-error``: ``(a @ theta - b) ** 2``,
* ``logistic``: multinomial logistic regression (softmax cross-entropy), weight
  matrix of shape ``(n_features + 1, n_classes)`` when ``fit_intercept``,
* ``mlp``: one tanh hidden layer followed by a softmax output.

Every objective adds ``reg * ||theta||^2 / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import log_softmax, softmax

from .exceptions import DimensionError, EmptyDatasetError, NonFiniteError

LOSS_KINDS = ("quadratic-synthetic", "squared-error", "logistic", "mlp")


@dataclass(frozen=True)
class LocalDataset:
    """Labeled samples held by one user.

    Attributes:
        X: inputs of shape ``(n_samples, n_features)``.
        y: labels of shape ``(n_samples,)``; real targets for regression
            losses, integer class ids for ``logistic`` and ``mlp``.
    """

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx) -> "LocalDataset":
        return LocalDataset(self.X[idx], self.y[idx])

    @classmethod
    def concat(cls, datasets) -> "LocalDataset":
        datasets = list(datasets)
        return cls(
            np.concatenate([d.X for d in datasets], axis=0),
            np.concatenate([d.y for d in datasets]),
        )


@dataclass(frozen=True)
class LossSpec:
    """Which objective to train and its hyper-parameters."""

    kind: str = "quadratic-synthetic"
    reg: float = 0.0
    n_classes: int = 2
    hidden: int = 50
    fit_intercept: bool = True

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not np.isfinite(self.reg) or self.reg < 0:
            raise ValueError(f"reg must be finite and >= 0, got {self.reg}")

    @property
    def is_classifier(self) -> bool:
        return self.kind in ("logistic", "mlp")

    def dim(self, n_features: int) -> int:
        """Number of model parameters for inputs with ``n_features`` columns."""
        if self.kind in ("quadratic-synthetic", "squared-error"):
            return n_features
        if self.kind == "logistic":
            return (n_features + int(self.fit_intercept)) * self.n_classes
        return n_features * self.hidden + self.hidden + self.hidden * self.n_classes + self.n_classes


@dataclass(frozen=True)
class LearningRate:
    """Step-size rule.

    ``constant`` uses ``eta0`` at every step. ``diminishing`` uses
    ``2 / (mu * (gamma + t))`` where ``t`` is the global step index.
    """

    kind: str = "constant"
    eta0: float = 0.1
    mu: float = 1.0
    gamma: float = 1.0

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return float(self.eta0)
        if self.kind == "diminishing":
            return 2.0 / (self.mu * (self.gamma + t))
        raise ValueError(f"unknown learning-rate kind {self.kind!r}")


def box_learning_rate(L: float, mu: float, local_steps: int) -> LearningRate:
    """Diminishing rule with ``gamma = max(8 L / mu, E)``."""
    return LearningRate(kind="diminishing", mu=mu, gamma=max(8.0 * L / mu, float(local_steps)))


@dataclass(frozen=True)
class TrainingSchedule:
    local_steps: int = 5
    batch_size: int = 10
    total_steps: int = 100
    lr: LearningRate = field(default_factory=LearningRate)

    def __post_init__(self):
        if self.local_steps < 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("local_steps >= 0, batch_size >= 1 and total_steps >= 0 required")

    @property
    def n_rounds(self) -> int:
        return self.total_steps // self.local_steps if self.local_steps else 0


# -- shape checks -----------------------------------------------------------


def _check(theta, ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if ds.n == 0:
        raise EmptyDatasetError("dataset has no samples")
    expected = spec.dim(ds.n_features)
    if theta.ndim != 1 or theta.shape[0] != expected:
        raise DimensionError(
            f"{spec.kind} model with {ds.n_features} features needs {expected} parameters, "
            f"got shape {theta.shape}"
        )
    return theta


def _design(X: np.ndarray, spec: LossSpec) -> np.ndarray:
    if spec.fit_intercept:
        return np.hstack([X, np.ones((X.shape[0], 1))])
    return X


def _unpack_mlp(theta, p, spec):
    h, c = spec.hidden, spec.n_classes
    i = 0
    W1 = theta[i:i + p * h].reshape(p, h)
    i += p * h
    b1 = theta[i:i + h]
    i += h
    W2 = theta[i:i + h * c].reshape(h, c)
    i += h * c
    b2 = theta[i:i + c]
    return W1, b1, W2, b2


def _onehot(y, n_classes):
    labels = y.astype(int)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DimensionError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _loss_and_grad(theta, X, y, spec: LossSpec, need_grad: bool):
    n = X.shape[0]
    kind = spec.kind
    if kind in ("quadratic-synthetic", "squared-error"):
        scale = 0.5 if kind == "quadratic-synthetic" else 1.0
        r = X @ theta - y
        loss = scale * float(r @ r) / n
        grad = (2.0 * scale / n) * (X.T @ r) if need_grad else None
    elif kind == "logistic":
        A = _design(X, spec)
        W = theta.reshape(A.shape[1], spec.n_classes)
        Y = _onehot(y, spec.n_classes)
        logp = log_softmax(A @ W, axis=1)
        loss = -float(np.sum(Y * logp)) / n
        grad = (A.T @ (np.exp(logp) - Y)).ravel() / n if need_grad else None
    else:
        W1, b1, W2, b2 = _unpack_mlp(theta, X.shape[1], spec)
        Y = _onehot(y, spec.n_classes)
        H = np.tanh(X @ W1 + b1)
        logp = log_softmax(H @ W2 + b2, axis=1)
        loss = -float(np.sum(Y * logp)) / n
        grad = None
        if need_grad:
            dZ = (np.exp(logp) - Y) / n
            dH = (dZ @ W2.T) * (1.0 - H ** 2)
            grad = np.concatenate([
                (X.T @ dH).ravel(), dH.sum(axis=0), (H.T @ dZ).ravel(), dZ.sum(axis=0)
            ])
    loss += 0.5 * spec.reg * float(theta @ theta)
    if need_grad:
        grad = grad + spec.reg * theta
    return loss, grad


# -- operations -------------------------------------------------------------


def local_loss(theta, ds: LocalDataset, spec: LossSpec) -> float:
    """Average per-sample loss on ``ds`` plus ``reg * ||theta||^2 / 2``."""
    theta = _check(theta, ds, spec)
    return _loss_and_grad(theta, ds.X, ds.y, spec, need_grad=False)[0]


def loss_gradient(theta, batch: LocalDataset, spec: LossSpec) -> np.ndarray:
    """Gradient of :func:`local_loss` evaluated on ``batch``."""
    theta = _check(theta, batch, spec)
    return _loss_and_grad(theta, batch.X, batch.y, spec, need_grad=True)[1]


def sgd_step(theta, batch: LocalDataset, eta: float, spec: LossSpec) -> np.ndarray:
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    grad = loss_gradient(theta, batch, spec)
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteError(
            f"non-finite gradient in {bad.size} coordinates (first index {bad[0]}), "
            f"step size {eta}, |theta|max={np.max(np.abs(theta)):.3g}"
        )
    return np.asarray(theta, dtype=float) - eta * grad


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield ``steps`` index arrays drawn without replacement within an epoch.

    The permutation is redrawn whenever fewer than ``batch_size`` unused
    indices remain.
    """
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def local_train(theta_global, ds: LocalDataset, spec: LossSpec, schedule: TrainingSchedule,
                rng: np.random.Generator, start_step: int = 0) -> np.ndarray:
    """Run ``schedule.local_steps`` SGD steps starting from ``theta_global``.

    ``start_step`` is the global step index of the first local step; it feeds
    the learning-rate rule.
    """
    theta = np.array(theta_global, dtype=float, copy=True)
    for j, idx in enumerate(batch_indices(ds.n, schedule.batch_size, schedule.local_steps, rng)):
        theta = sgd_step(theta, ds.subset(idx), schedule.lr(start_step + j), spec)
    return theta


def global_loss(theta, datasets, p, spec: LossSpec) -> float:
    p = np.asarray(p, dtype=float)
    if len(datasets) != p.shape[0]:
        raise DimensionError(f"{len(datasets)} datasets but {p.shape[0]} weights")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1, got sum {p.sum()!r}")
    return float(sum(pi * local_loss(theta, ds, spec) for pi, ds in zip(p, datasets)))


def size_weights(datasets) -> np.ndarray:
    """``p_i = n_i / sum_j n_j``."""
    n = np.array([ds.n for ds in datasets], dtype=float)
    return n / n.sum()


def init_params(spec: LossSpec, n_features: int, rng=None, scale: float = 0.1) -> np.ndarray:
    """Zero vector for convex models, small random weights for the MLP."""
    d = spec.dim(n_features)
    if spec.kind != "mlp":
        return np.zeros(d)
    rng = np.random.default_rng(0) if rng is None else rng
    return scale * rng.standard_normal(d)


def predict(theta, X, spec: LossSpec) -> np.ndarray:
    """Regression output, or class probabilities of shape ``(n, n_classes)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.asarray(theta, dtype=float)
    if spec.kind in ("quadratic-synthetic", "squared-error"):
        return X @ theta
    if spec.kind == "logistic":
        A = _design(X, spec)
        return softmax(A @ theta.reshape(A.shape[1], spec.n_classes), axis=1)
    W1, b1, W2, b2 = _unpack_mlp(theta, X.shape[1], spec)
    return softmax(np.tanh(X @ W1 + b1) @ W2 + b2, axis=1)


def accuracy(theta, ds: LocalDataset, spec: LossSpec) -> float:
    """Classification accuracy; NaN for regression losses."""
    if not spec.is_classifier:
        return float("nan")
    return float(np.mean(np.argmax(predict(theta, ds.X, spec), axis=1) == ds.y.astype(int)))


# -- problem constants --------------------------------------------------------


def hessian_bounds(ds: LocalDataset, spec: LossSpec) -> tuple[float, float]:
    """Smoothness and strong-convexity constants ``(L, mu)`` of one local objective.

    Exact eigenvalues for the quadratic losses. For ``logistic`` the softmax
    Hessian is bounded by ``0.5 * A^T A / n`` and only ``reg`` is certified
    as curvature floor.
    """
    if spec.kind in ("quadratic-synthetic", "squared-error"):
        scale = 1.0 if spec.kind == "quadratic-synthetic" else 2.0
        eig = np.linalg.eigvalsh(scale * ds.X.T @ ds.X / ds.n)
        return float(eig[-1] + spec.reg), float(max(eig[0], 0.0) + spec.reg)
    if spec.kind == "logistic":
        A = _design(ds.X, spec)
        top = float(np.linalg.eigvalsh(A.T @ A / ds.n)[-1])
        return 0.5 * top + spec.reg, float(spec.reg)
    raise ValueError(f"no curvature bounds for loss kind {spec.kind!r}")


def minimize_loss(ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    """Minimizer of :func:`local_loss` (closed form for quadratic losses)."""
    if ds.n == 0:
        raise EmptyDatasetError("dataset has no samples")
    if spec.kind in ("quadratic-synthetic", "squared-error"):
        A = ds.X.T @ ds.X / ds.n
        scale = 1.0 if spec.kind == "quadratic-synthetic" else 2.0
        H = scale * A + spec.reg * np.eye(ds.n_features)
        return np.linalg.solve(H, scale * ds.X.T @ ds.y / ds.n)
    if spec.kind == "logistic":
        x0 = np.zeros(spec.dim(ds.n_features))
        res = optimize.minimize(
            lambda th: _loss_and_grad(th, ds.X, ds.y, spec, True), x0, jac=True,
            method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-15},
        )
        return res.x
    raise ValueError(f"no global minimizer available for loss kind {spec.kind!r}")


def load_columnar(path) -> LocalDataset:
    """Read one sample per line: comma-separated features, label last."""
    data = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    if data.shape[0] == 0:
        raise EmptyDatasetError(f"{path} contains no samples")
    return LocalDataset(data[:, :-1], data[:, -1])


def save_columnar(ds: LocalDataset, path) -> None:
    np.savetxt(Path(path), np.column_stack([ds.X, ds.y]), delimiter=",", fmt="%.17g")
