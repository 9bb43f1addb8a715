"""User selection policies and min-max resource-block assignment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .exceptions import AllocationError

SELECTION_KINDS = ("full", "uniform", "probabilistic", "round-robin", "bandit")


@dataclass(frozen=True)
class SelectionPolicy:
    """How the server picks the users of each round.

    Attributes:
        kind: one of ``full``, ``uniform``, ``probabilistic``, ``round-robin``,
            ``bandit``.
        k: participants per round (ignored by ``full``).
        balance: weight of the update-norm term in the probabilistic rule.
        explore: exploration constant of the bandit index.
    """

    kind: str = "full"
    k: int = 1
    balance: float = 0.5
    explore: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.kind not in SELECTION_KINDS:
            raise AllocationError(f"unknown selection kind {self.kind!r}")
        if self.kind != "full" and self.k < 1:
            raise AllocationError(f"selection needs k >= 1, got {self.k}")
        if not 0.0 <= self.balance <= 1.0:
            raise AllocationError(f"balance must lie in [0, 1], got {self.balance}")


def select_uniform(n_users: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random ``k``-subset of ``range(n_users)``, sorted."""
    if not 1 <= k <= n_users:
        raise AllocationError(f"cannot select {k} of {n_users} users")
    return np.sort(rng.choice(n_users, size=k, replace=False))


def participation_probabilities(update_norms, distances, balance: float) -> np.ndarray:
    """Mix of update-norm share and closeness share.

    Degenerate terms fall back to uniform: all norms zero for the first
    term, all distances equal for the second.
    """
    norms = np.asarray(update_norms, dtype=float)
    dist = np.asarray(distances, dtype=float)
    n = norms.shape[0]
    if dist.shape[0] != n:
        raise AllocationError(f"{n} norms but {dist.shape[0]} distances")
    if np.any(norms < 0) or np.any(dist < 0):
        raise AllocationError("norms and distances must be non-negative")
    total = norms.sum()
    norm_term = norms / total if total > 0 else np.full(n, 1.0 / n)
    slack = dist.max() - dist
    denom = n * dist.max() - dist.sum()
    dist_term = slack / denom if denom > 0 else np.full(n, 1.0 / n)
    return balance * norm_term + (1.0 - balance) * dist_term


def sample_without_replacement(prob, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct indices one at a time, renormalizing ``prob`` over
    the remaining ones. Once the remaining mass is zero the rest is uniform."""
    prob = np.asarray(prob, dtype=float).copy()
    n = prob.shape[0]
    if not 1 <= k <= n:
        raise AllocationError(f"cannot select {k} of {n} users")
    chosen = []
    alive = np.ones(n, dtype=bool)
    for _ in range(k):
        w = np.where(alive, prob, 0.0)
        if w.sum() <= 0:
            w = alive.astype(float)
        i = int(np.searchsorted(np.cumsum(w / w.sum()), rng.random(), side="right"))
        i = min(i, n - 1)
        while not alive[i]:
            i -= 1
        chosen.append(i)
        alive[i] = False
    return np.sort(np.array(chosen, dtype=np.int64))


def select_probabilistic(update_norms, distances, balance: float, k: int, rng: np.random.Generator) -> np.ndarray:
    return sample_without_replacement(participation_probabilities(update_norms, distances, balance), k, rng)


def select_round_robin(n_users: int, k: int, round_index: int) -> np.ndarray:
    if not 1 <= k <= n_users:
        raise AllocationError(f"cannot select {k} of {n_users} users")
    start = (round_index * k) % n_users
    return np.sort((start + np.arange(k)) % n_users)


@dataclass
class BanditHistory:
    """Running mean transmit time and participation count per user."""

    mean_delay: np.ndarray
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean_delay = np.asarray(self.mean_delay, dtype=float)
        if self.counts is None:
            self.counts = np.zeros(self.mean_delay.shape[0], dtype=np.int64)

    @classmethod
    def empty(cls, n_users: int) -> "BanditHistory":
        return cls(np.zeros(n_users))

    def record(self, user: int, delay: float) -> None:
        self.counts[user] += 1
        self.mean_delay[user] += (delay - self.mean_delay[user]) / self.counts[user]


def bandit_indices(history: BanditHistory, round_index: int, explore: float = math.sqrt(2.0)) -> np.ndarray:
    t = max(int(round_index), 1)
    bonus = explore * np.sqrt(math.log(t) / np.maximum(1, history.counts))
    index = -history.mean_delay + bonus
    return np.where(history.counts == 0, np.inf, index)


def select_bandit(history: BanditHistory, k: int, round_index: int, explore: float = math.sqrt(2.0)) -> np.ndarray:
    """The ``k`` users with the highest upper-confidence index.

    Users never selected have an infinite index; ties go to the lowest id.
    """
    if round_index < 1:
        raise AllocationError("bandit rounds are counted from 1")
    n = history.mean_delay.shape[0]
    if not 1 <= k <= n:
        raise AllocationError(f"cannot select {k} of {n} users")
    index = bandit_indices(history, round_index, explore)
    return np.sort(np.argsort(-index, kind="stable")[:k])


# -- resource blocks ------------------------------------------------------------


def delay_matrix(bit_costs, rates) -> np.ndarray:
    """``D[i, k] = bits_i / R[i, k]``."""
    bits = np.asarray(bit_costs, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if np.any(rates <= 0):
        raise AllocationError("every rate must be positive to form a delay matrix")
    return bits[:, None] / rates


def _matching(mask: np.ndarray) -> np.ndarray:
    return maximum_bipartite_matching(csr_matrix(mask.astype(np.int8)), perm_type="column")


def assign_blocks(D) -> tuple[np.ndarray, float]:
    """Assign one distinct block to each user minimizing the largest delay.

    Binary search over the distinct delay values, each step testing whether
    a perfect matching of users to blocks exists using only entries at or
    below the threshold.

    Returns:
        ``(blocks, bottleneck)`` where ``blocks[i]`` is the block of user ``i``.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    m, k = D.shape
    if m == 0 or m > k:
        raise AllocationError(f"cannot place {m} users on {k} blocks")
    if not np.all(np.isfinite(D)) or np.any(D <= 0):
        raise AllocationError("delays must be positive and finite")
    values = np.unique(D)
    lo, hi = 0, values.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if np.all(_matching(D <= values[mid]) >= 0):
            hi = mid
        else:
            lo = mid + 1
    blocks = _matching(D <= values[lo]).astype(np.int64)
    return blocks, float(D[np.arange(m), blocks].max())
