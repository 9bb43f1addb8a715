"""Synthetic generators, bundled datasets and user partitioning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import ortho_group

from .exceptions import EmptyDatasetError
from .model import LocalDataset

PARTITION_KINDS = ("iid", "label-shard", "clustered")


@dataclass(frozen=True, eq=False)
class Pool:
    """Pooled training data before it is split among users.

    ``groups`` carries the generator (cluster) id of every sample for
    clustered data.
    """

    data: LocalDataset
    groups: Optional[np.ndarray] = None


def make_quadratic(n_samples: int, n_features: int, rng: np.random.Generator, noise: float = 1.0,
                   condition: float = 2.0):
    """Least-squares data with feature covariance eigenvalues spread over
    ``[1, condition]``. Returns the dataset and the generating weights."""
    eig = np.linspace(1.0, condition, n_features)
    Q = ortho_group.rvs(n_features, random_state=rng) if n_features > 1 else np.eye(1)
    X = rng.standard_normal((n_samples, n_features)) @ (np.sqrt(eig)[:, None] * Q)
    theta = rng.standard_normal(n_features)
    y = X @ theta + noise * rng.standard_normal(n_samples)
    return LocalDataset(X, y), theta


def load_digits_split(rng: np.random.Generator, test_fraction: float = 0.2):
    """The 8x8 handwritten digits (1797 samples), features scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    perm = rng.permutation(X.shape[0])
    X, y = X[perm] / 16.0, y[perm]
    n_test = int(round(test_fraction * X.shape[0]))
    return LocalDataset(X[n_test:], y[n_test:]), LocalDataset(X[:n_test], y[:n_test])


@dataclass(frozen=True, eq=False)
class ClusterGenerator:
    """Inputs from a uniform mixture of identity-covariance Gaussians,
    targets from a cluster-specific linear model."""

    means: np.ndarray
    theta: np.ndarray
    noise: float

    def sample(self, n: int, rng: np.random.Generator) -> LocalDataset:
        comp = rng.integers(self.means.shape[0], size=n)
        X = self.means[comp] + rng.standard_normal((n, self.means.shape[1]))
        y = X @ self.theta + self.noise * rng.standard_normal(n)
        return LocalDataset(X, y)


def make_cluster_generators(n_clusters: int, n_features: int, rng: np.random.Generator,
                            components: int = 3, separation: float = 8.0, spread: float = 2.0,
                            noise: float = 0.1) -> list[ClusterGenerator]:
    gens = []
    for c in range(n_clusters):
        center = np.zeros(n_features)
        center[c % n_features] = separation * (1 + c // n_features)
        means = center + spread * rng.standard_normal((components, n_features))
        gens.append(ClusterGenerator(means, rng.standard_normal(n_features), noise))
    return gens


def sample_clustered(gens, n_per_cluster: int, rng: np.random.Generator) -> Pool:
    parts = [g.sample(n_per_cluster, rng) for g in gens]
    groups = np.concatenate([np.full(p.n, c) for c, p in enumerate(parts)])
    return Pool(LocalDataset.concat(parts), groups)


def partition_dataset(pool: Pool, n_users: int, kind: str, rng: np.random.Generator,
                      shards_per_user: int = 2) -> list[LocalDataset]:
    """Split ``pool`` among ``n_users``.

    ``iid``: random near-equal split. ``label-shard``: sort by label, cut into
    ``shards_per_user * n_users`` shards, hand each user that many random
    shards. ``clustered``: user ``i`` belongs to cluster ``i mod C`` and gets
    a random near-equal share of that cluster's samples.
    """
    data = pool.data
    if data.n < n_users:
        raise EmptyDatasetError(f"{data.n} samples cannot be split among {n_users} users")
    if kind == "iid":
        return [data.subset(np.sort(p)) for p in np.array_split(rng.permutation(data.n), n_users)]
    if kind == "label-shard":
        n_shards = shards_per_user * n_users
        if data.n < n_shards:
            raise EmptyDatasetError(f"{data.n} samples cannot form {n_shards} shards")
        order = np.argsort(data.y, kind="stable")
        shards = np.array_split(order, n_shards)
        assign = rng.permutation(n_shards).reshape(n_users, shards_per_user)
        return [data.subset(np.sort(np.concatenate([shards[s] for s in row]))) for row in assign]
    if kind == "clustered":
        if pool.groups is None:
            raise ValueError("clustered partition needs cluster ids on the pool")
        clusters = np.unique(pool.groups)
        if n_users < clusters.size:
            raise ValueError(f"{clusters.size} clusters need at least as many users, got {n_users}")
        out: list = [None] * n_users
        for c in clusters:
            users = [i for i in range(n_users) if clusters[i % clusters.size] == c]
            idx = rng.permutation(np.flatnonzero(pool.groups == c))
            if idx.size < len(users):
                raise EmptyDatasetError(f"cluster {c} has fewer samples than users")
            for u, part in zip(users, np.array_split(idx, len(users))):
                out[u] = data.subset(np.sort(part))
        return out
    raise ValueError(f"unknown partition kind {kind!r}; expected one of {PARTITION_KINDS}")


def user_clusters(n_users: int, n_clusters: int) -> np.ndarray:
    """Cluster id of each user under the clustered partition."""
    return np.arange(n_users) % n_clusters
