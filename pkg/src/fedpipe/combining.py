"""Server-side combining: weighted averaging, Byzantine-robust aggregators,
attack injection and mixture-of-models inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.mixture import GaussianMixture

from .encoding import ModelUpdate
from .exceptions import CombiningError, DimensionError
from .model import LossSpec, predict

COMBINER_KINDS = ("fedavg", "median", "trimmed-mean", "krum")
ATTACK_KINDS = ("sign-flip", "gaussian", "scale", "reported-size")


@dataclass(frozen=True, eq=False)
class UpdateBatch:
    """Decoded deltas received in one round.

    Rows with zero weight are treated as absent by every combiner, so a user
    emitting a zero-weight payload is indistinguishable from one that was
    never scheduled.

    Attributes:
        rows: deltas of shape ``(m, d)``.
        weights: aggregation weights ``p_i`` of those rows.
        reference: the global model the deltas are relative to.
        user_ids: ids of the rows, ascending.
        n_users: total population size ``N``.
    """

    rows: np.ndarray
    weights: np.ndarray
    reference: np.ndarray
    user_ids: Optional[np.ndarray] = None
    n_users: Optional[int] = None

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        reference = np.asarray(self.reference, dtype=float).reshape(-1)
        if rows.shape[0] != weights.shape[0]:
            raise DimensionError(f"{rows.shape[0]} rows but {weights.shape[0]} weights")
        if rows.shape[1] != reference.shape[0]:
            raise DimensionError(f"rows have length {rows.shape[1]}, reference {reference.shape[0]}")
        if np.any(weights < 0):
            raise CombiningError("weights must be non-negative")
        ids = np.arange(rows.shape[0]) if self.user_ids is None else np.asarray(self.user_ids, dtype=np.int64)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "reference", reference)
        object.__setattr__(self, "user_ids", ids)
        if self.n_users is None:
            object.__setattr__(self, "n_users", rows.shape[0])

    @classmethod
    def from_updates(cls, updates: Sequence[ModelUpdate], weights, reference, n_users=None) -> "UpdateBatch":
        rows = np.stack([u.delta for u in updates]) if updates else np.zeros((0, len(reference)))
        return cls(rows, weights, reference, np.array([u.user_id for u in updates], dtype=np.int64), n_users)

    def active(self) -> "UpdateBatch":
        keep = self.weights > 0
        return UpdateBatch(self.rows[keep], self.weights[keep], self.reference, self.user_ids[keep], self.n_users)

    def scaled_rows(self) -> np.ndarray:
        """Rows multiplied by ``N * p_i``."""
        return self.rows * (self.n_users * self.weights)[:, None]


def fedavg_combine(batch: UpdateBatch, mode: str = "literal") -> np.ndarray:
    """New global model from participating deltas.

    ``literal``: ``N/|G| * sum_i p_i (g_i + theta_ref)``.
    ``delta``: ``theta_ref + N/|G| * sum_i p_i g_i``.
    The two agree whenever the participating weights sum to ``|G|/N``.
    """
    b = batch.active()
    m = b.rows.shape[0]
    if m == 0:
        raise CombiningError("no participating users to combine")
    factor = b.n_users / m
    if mode == "literal":
        return factor * (b.weights @ (b.rows + b.reference[None, :]))
    if mode == "delta":
        return b.reference + factor * (b.weights @ b.rows)
    raise CombiningError(f"unknown fedavg mode {mode!r}")


def _robust_rows(batch: UpdateBatch, weighted: bool) -> np.ndarray:
    b = batch.active()
    if b.rows.shape[0] == 0:
        raise CombiningError("no participating users to combine")
    return b.scaled_rows() if weighted else b.rows


def median_combine(batch: UpdateBatch, weighted: bool = False) -> np.ndarray:
    """Coordinate-wise median; even counts take the midpoint of the two middle values."""
    return np.median(_robust_rows(batch, weighted), axis=0)


def trimmed_mean_combine(batch: UpdateBatch, beta: float, weighted: bool = False) -> tuple[np.ndarray, int]:
    """Coordinate-wise mean after dropping the ``floor(beta m)`` largest and
    smallest values. Returns the aggregate and the per-side trim count."""
    rows = _robust_rows(batch, weighted)
    m = rows.shape[0]
    if not 0.0 <= beta < 0.5:
        raise CombiningError(f"beta must lie in [0, 0.5), got {beta}")
    cut = int(np.floor(beta * m))
    if m - 2 * cut < 1:
        raise CombiningError(f"trimming {cut} per side leaves nothing of {m} rows")
    if cut == 0:
        return rows.mean(axis=0), 0
    kept = np.sort(rows, axis=0)[cut:m - cut]
    return kept.sum(axis=0) / (m - 2 * cut), cut


def krum_scores(rows: np.ndarray, f: int) -> np.ndarray:
    m = rows.shape[0]
    dist = np.sum((rows[:, None, :] - rows[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(dist, np.inf)
    nearest = np.sort(dist, axis=1)[:, : m - f - 2]
    return nearest.sum(axis=1)


def krum_combine(batch: UpdateBatch, f: int, weighted: bool = False) -> tuple[np.ndarray, int]:
    """Row whose ``m - f - 2`` nearest neighbours are closest in squared
    distance. Returns the row and its user id (ties: lowest id)."""
    b = batch.active()
    rows = b.scaled_rows() if weighted else b.rows
    m = rows.shape[0]
    if f < 0 or m < f + 3:
        raise CombiningError(f"Krum with f={f} needs at least {f + 3} rows, got {m}")
    scores = krum_scores(rows, f)
    best = int(np.argmin(scores))
    return rows[best].copy(), int(b.user_ids[best])


# -- attacks ------------------------------------------------------------------


@dataclass(frozen=True)
class Attack:
    """Byzantine behaviour applied to an honest update.

    ``sign-flip`` sends ``-magnitude * delta`` (plain negation by default);
    ``gaussian`` replaces the delta by ``N(0, sigma^2)`` noise; ``scale``
    multiplies it by ``factor``; ``reported-size`` lies about ``n_i``.
    """

    kind: str = "sign-flip"
    magnitude: float = 1.0
    sigma: float = 1.0
    factor: float = 1.0
    reported_n: int = 1

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not all(np.isfinite([self.magnitude, self.sigma, self.factor])):
            raise ValueError("attack parameters must be finite")


def byzantine_perturb(update: ModelUpdate, attack: Attack, rng: np.random.Generator) -> ModelUpdate:
    if attack.kind == "sign-flip":
        return update.replace(delta=-attack.magnitude * update.delta)
    if attack.kind == "gaussian":
        return update.replace(delta=attack.sigma * rng.standard_normal(update.d))
    if attack.kind == "scale":
        return update.replace(delta=attack.factor * update.delta)
    return update.replace(n_samples=int(attack.reported_n))


# -- mixture of models ----------------------------------------------------------


@dataclass(eq=False)
class ClusterModelSet:
    """Per-cluster models with Gaussian-mixture input densities."""

    models: list
    densities: list
    loss: LossSpec

    def __post_init__(self):
        if len(self.models) < 1 or len(self.models) != len(self.densities):
            raise CombiningError("need one density per cluster model and at least one cluster")

    @property
    def n_clusters(self) -> int:
        return len(self.models)

    @staticmethod
    def fit_density(X, n_components: int = 3, seed: int = 0) -> GaussianMixture:
        return GaussianMixture(n_components=n_components, covariance_type="full", random_state=seed,
                               n_init=3).fit(np.asarray(X, dtype=float))


def cluster_gate(a, models: ClusterModelSet, return_flag: bool = False):
    """Gate weights ``Q_c(a) / sum_k Q_k(a)`` for each row of ``a``.

    Normalization happens in log space; rows where every density is zero even
    in log space get uniform weights and are flagged.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    logq = np.column_stack([g.score_samples(a) for g in models.densities])
    dead = ~np.any(np.isfinite(logq), axis=1)
    logq = np.where(dead[:, None], 0.0, logq)
    weights = np.exp(logq - logsumexp(logq, axis=1, keepdims=True))
    return (weights, dead) if return_flag else weights


def mixture_predict(a, models: ClusterModelSet) -> np.ndarray:
    """Gate-weighted combination of the cluster models' predictions."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    w = cluster_gate(a, models)
    preds = [predict(theta, a, models.loss) for theta in models.models]
    if preds[0].ndim == 1:
        return sum(w[:, c] * preds[c] for c in range(models.n_clusters))
    return sum(w[:, c:c + 1] * preds[c] for c in range(models.n_clusters))
