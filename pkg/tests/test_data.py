from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpipe.data import (
    Pool, load_digits_split, make_cluster_generators, make_quadratic, partition_dataset, sample_clustered,
    user_clusters,
)
from fedpipe.exceptions import EmptyDatasetError
from fedpipe.model import LocalDataset


def _pool(n=40, labels=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    return Pool(LocalDataset(X, np.arange(n) % labels * 1.0))


def _rows(parts):
    return Counter(tuple(np.append(x, y)) for ds in parts for x, y in zip(ds.X, ds.y))


def test_iid_single_user_gets_everything():
    pool = _pool()
    (only,) = partition_dataset(pool, 1, "iid", np.random.default_rng(0))
    assert _rows([only]) == _rows([pool.data])


def test_label_shard_two_labels_two_users():
    pool = Pool(LocalDataset(np.arange(20.0)[:, None], np.repeat([0.0, 1.0], 10)))
    parts = partition_dataset(pool, 2, "label-shard", np.random.default_rng(3))
    assert all(len(set(ds.y.tolist())) <= 2 for ds in parts)


def test_label_shard_limits_labels_per_user():
    pool = _pool(n=200, labels=10)
    parts = partition_dataset(pool, 10, "label-shard", np.random.default_rng(1))
    assert all(len(set(ds.y.tolist())) <= 2 for ds in parts)


@pytest.mark.parametrize("kind", ["iid", "label-shard"])
@given(n_users=st.integers(1, 8), seed=st.integers(0, 2 ** 31))
def test_partition_is_exact_multiset_split(kind, n_users, seed):
    pool = _pool(n=60, seed=seed % 7)
    parts = partition_dataset(pool, n_users, kind, np.random.default_rng(seed))
    assert len(parts) == n_users
    assert _rows(parts) == _rows([pool.data])


def test_clustered_partition_respects_clusters():
    rng = np.random.default_rng(0)
    gens = make_cluster_generators(3, 2, rng)
    pool = sample_clustered(gens, 30, rng)
    parts = partition_dataset(pool, 6, "clustered", rng)
    assert _rows(parts) == _rows([pool.data])
    members = user_clusters(6, 3)
    for u, ds in enumerate(parts):
        own = pool.data.subset(np.flatnonzero(pool.groups == members[u]))
        assert set(_rows([ds])) <= set(_rows([own]))


def test_partition_errors():
    with pytest.raises(EmptyDatasetError):
        partition_dataset(_pool(n=3), 4, "iid", np.random.default_rng(0))
    with pytest.raises(ValueError):
        partition_dataset(_pool(), 2, "clustered", np.random.default_rng(0))
    with pytest.raises(ValueError):
        partition_dataset(_pool(), 2, "by-vibes", np.random.default_rng(0))


def test_quadratic_generator_spectrum():
    ds, theta = make_quadratic(20_000, 3, np.random.default_rng(0), noise=0.0, condition=4.0)
    eig = np.linalg.eigvalsh(ds.X.T @ ds.X / ds.n)
    np.testing.assert_allclose(eig, [1.0, 2.5, 4.0], rtol=0.05)
    np.testing.assert_allclose(ds.X @ theta, ds.y)


def test_digits_split_sizes():
    train, test = load_digits_split(np.random.default_rng(0), 0.2)
    assert train.n + test.n == 1797 and test.n == 359
    assert train.X.max() <= 1.0
