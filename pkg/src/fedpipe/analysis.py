"""Convergence-bound calculators and per-round metrics records."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._rng import substream
from .exceptions import FedPipeError
from .model import (
    LocalDataset, LossSpec, TrainingSchedule, batch_indices, global_loss, hessian_bounds,
    local_loss, local_train, loss_gradient, minimize_loss, size_weights,
)

METRIC_COLUMNS = ("round", "delay_s", "bits", "train_loss", "test_loss", "test_acc")
BOUND_COLUMNS = ("fedavg_bound", "uveqfed_bound", "cotaf_bound")


@dataclass(frozen=True)
class BoundParams:
    """Problem constants entering the local-SGD convergence bound.

    The lattice fields are needed only by :func:`uveqfed_bound` and the
    over-the-air fields only by :func:`cotaf_bound`.
    """

    L: float
    mu: float
    E: int
    T: int
    Gamma: float
    G2: float
    p: np.ndarray
    sigma2: np.ndarray
    init_dist: float
    n_subvectors: Optional[int] = None
    zeta: Optional[float] = None
    lattice_moment: Optional[float] = None
    d: Optional[int] = None
    noise_var: Optional[float] = None
    power: Optional[float] = None
    n_users: Optional[int] = None
    sampled_sqnorm_max: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.L >= self.mu > 0):
            raise ValueError(f"need L >= mu > 0, got L={self.L}, mu={self.mu}")
        if self.E < 1:
            raise ValueError("E must be at least 1")
        if min(self.Gamma, self.G2, self.init_dist) < 0 or np.any(np.asarray(self.sigma2) < 0):
            raise ValueError("Gamma, G2, sigma2 and init_dist must be non-negative")
        for name in ("L", "mu", "Gamma", "G2", "init_dist"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float))

    def at(self, T: int) -> "BoundParams":
        return replace(self, T=int(T))

    @property
    def gamma(self) -> float:
        return max(8.0 * self.L / self.mu, float(self.E))

    @property
    def weighted_variance(self) -> float:
        return float(np.sum(self.p ** 2 * self.sigma2))

    @property
    def B(self) -> float:
        return self.weighted_variance + 6.0 * self.L * self.Gamma + 8.0 * (self.E - 1) ** 2 * self.G2


def _bound(bp: BoundParams, B: float) -> float:
    g = bp.gamma
    return float(bp.L / (g + bp.T - 1) * (2.0 * B / bp.mu ** 2 + 0.5 * g * bp.init_dist))


def fedavg_bound(bp: BoundParams) -> float:
    return _bound(bp, bp.B)


def uveqfed_extra(bp: BoundParams) -> float:
    if None in (bp.n_subvectors, bp.zeta, bp.lattice_moment):
        raise ValueError("uveqfed bound needs n_subvectors, zeta and lattice_moment")
    return 4.0 * bp.n_subvectors * bp.zeta ** 2 * bp.lattice_moment * bp.E ** 2 * bp.weighted_variance


def uveqfed_bound(bp: BoundParams) -> float:
    return _bound(bp, bp.B + uveqfed_extra(bp))


def cotaf_extra(bp: BoundParams) -> float:
    if None in (bp.d, bp.noise_var, bp.power, bp.n_users):
        raise ValueError("cotaf bound needs d, noise_var, power and n_users")
    return 4.0 * bp.d * bp.E ** 2 * bp.G2 * bp.noise_var / (bp.power * bp.n_users ** 2)


def cotaf_bound(bp: BoundParams) -> float:
    return _bound(bp, bp.B + cotaf_extra(bp))


# -- estimation -----------------------------------------------------------------


def _per_sample_grads(theta, ds: LocalDataset, spec: LossSpec) -> np.ndarray:
    if spec.kind in ("quadratic-synthetic", "squared-error"):
        scale = 1.0 if spec.kind == "quadratic-synthetic" else 2.0
        r = ds.X @ theta - ds.y
        return scale * r[:, None] * ds.X + spec.reg * theta[None, :]
    return np.stack([loss_gradient(theta, ds.subset([j]), spec) for j in range(ds.n)])


def minibatch_variance(theta, ds: LocalDataset, spec: LossSpec, batch_size: int) -> float:
    """Exact ``E||g_B - grad f||^2`` for batches drawn without replacement."""
    g = _per_sample_grads(theta, ds, spec)
    spread = float(np.mean(np.sum((g - g.mean(axis=0)) ** 2, axis=1)))
    if ds.n == 1:
        return 0.0
    return spread * (ds.n - batch_size) / (batch_size * (ds.n - 1))


def global_minimizer(datasets, spec: LossSpec) -> np.ndarray:
    """Minimizer of the size-weighted global objective (the pooled problem)."""
    return minimize_loss(LocalDataset.concat(datasets), spec)


def estimate_bound_params(datasets, spec: LossSpec, schedule: TrainingSchedule, theta0,
                          seed: int = 0, probe_rounds: int = 20, probe_batches: int = 10) -> BoundParams:
    """Estimate the bound constants for a convex objective.

    ``L`` and ``mu`` come from the data spectrum, ``Gamma`` from exact local
    and global minima. ``sigma_i^2`` is the exact mini-batch variance and
    ``G^2`` is 1.2 times the largest squared norm of sampled mini-batch
    gradients, both taken over the iterates of a short full-participation
    reference run starting at ``theta0``.
    """
    if spec.kind not in ("quadratic-synthetic", "squared-error", "logistic"):
        raise FedPipeError(f"bound estimation does not support loss kind {spec.kind!r}")
    if spec.kind == "logistic" and spec.reg <= 0:
        raise FedPipeError("logistic bounds need reg > 0 for strong convexity")
    L = max(hessian_bounds(ds, spec)[0] for ds in datasets)
    mu = min(hessian_bounds(ds, spec)[1] for ds in datasets)
    if mu <= 0:
        raise FedPipeError("objective is not strongly convex on some user's data")
    p = size_weights(datasets)
    theta_star = global_minimizer(datasets, spec)
    F_star = global_loss(theta_star, datasets, p, spec)
    local_min = sum(pi * local_loss(minimize_loss(ds, spec), ds, spec) for pi, ds in zip(p, datasets))
    Gamma = max(F_star - local_min, 0.0)
    theta0 = np.asarray(theta0, dtype=float)

    iterates = [theta0]
    theta = theta0
    for r in range(probe_rounds):
        locals_ = [local_train(theta, ds, spec, schedule, substream(seed, "bound-probe", r, i),
                               start_step=r * schedule.local_steps) for i, ds in enumerate(datasets)]
        theta = np.sum([pi * th for pi, th in zip(p, locals_)], axis=0)
        iterates.extend(locals_)
        iterates.append(theta)

    sigma2 = np.zeros(len(datasets))
    sampled = 0.0
    rng = substream(seed, "bound-probe-batches")
    for k, th in enumerate(iterates):
        for i, ds in enumerate(datasets):
            sigma2[i] = max(sigma2[i], minibatch_variance(th, ds, spec, schedule.batch_size))
            for idx in batch_indices(ds.n, schedule.batch_size, probe_batches, rng):
                g = loss_gradient(th, ds.subset(idx), spec)
                sampled = max(sampled, float(g @ g))
    return BoundParams(
        L=L, mu=mu, E=max(schedule.local_steps, 1), T=schedule.total_steps, Gamma=Gamma,
        G2=1.2 * sampled, p=p, sigma2=sigma2, init_dist=float(np.sum((theta0 - theta_star) ** 2)),
        sampled_sqnorm_max=sampled,
    )


# -- metrics --------------------------------------------------------------------


@dataclass
class MetricsRecord:
    round: int
    delay_s: float
    bits: int
    train_loss: float
    test_loss: float
    test_acc: float
    bounds: dict = field(default_factory=dict)
    participants: tuple = ()
    info: dict = field(default_factory=dict)  # per-round diagnostics (Krum pick, trim count, alpha)

    def __post_init__(self):
        self.round, self.bits = int(self.round), int(self.bits)
        self.delay_s, self.train_loss = float(self.delay_s), float(self.train_loss)
        self.test_loss, self.test_acc = float(self.test_loss), float(self.test_acc)
        self.bounds = {k: float(v) for k, v in self.bounds.items()}
        if self.delay_s < 0 or self.bits < 0:
            raise ValueError("delay and bits must be non-negative")

    def row(self, bound_columns: Sequence[str]) -> list:
        values = [self.round, self.delay_s, self.bits, self.train_loss, self.test_loss, self.test_acc]
        values += [self.bounds.get(c, float("nan")) for c in bound_columns]
        return [repr(v) if isinstance(v, float) else str(v) for v in values]

    def to_dict(self) -> dict:
        return {"round": self.round, "delay_s": self.delay_s, "bits": self.bits,
                "train_loss": self.train_loss, "test_loss": self.test_loss, "test_acc": self.test_acc,
                "bounds": dict(self.bounds), "participants": list(self.participants), "info": dict(self.info)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        d["participants"] = tuple(d.get("participants", ()))
        return cls(**d)


def metrics_csv(records: Sequence[MetricsRecord], bound_columns: Sequence[str] = ()) -> str:
    """Render records as CSV text with the fixed column order."""
    for a, b in zip(records, records[1:]):
        if b.round <= a.round:
            raise ValueError("metrics rounds must increase")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(METRIC_COLUMNS) + list(bound_columns))
    for rec in records:
        writer.writerow(rec.row(bound_columns))
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
