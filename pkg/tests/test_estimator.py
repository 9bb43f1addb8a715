import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import load_digits

from fedpipe.data import make_cluster_generators, sample_clustered
from fedpipe.estimator import FederatedClassifier, FederatedRegressor, MixtureRegressor


def test_regressor_recovers_linear_model():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 3))
    w = np.array([1.0, -2.0, 0.5])
    y = X @ w + 0.01 * rng.standard_normal(400)
    est = FederatedRegressor(n_users=4, total_steps=400, eta0=0.05, random_state=1).fit(X, y)
    np.testing.assert_allclose(est.coef_, w, atol=0.05)
    assert est.score(X, y) > 0.99
    assert len(est.history_) == 80


def test_regressor_is_cloneable_and_deterministic():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((100, 2)), rng.standard_normal(100)
    est = FederatedRegressor(n_users=2, total_steps=20, config={"encoder.kind": "qsgd"})
    a = clone(est).fit(X, y).predict(X)
    b = clone(est).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)
    assert est.get_params()["config"] == {"encoder.kind": "qsgd"}


def test_classifier_on_digits():
    X, y = load_digits(return_X_y=True)
    X = X / 16.0
    clf = FederatedClassifier(n_users=5, batch_size=20, total_steps=200, eta0=0.5, random_state=0).fit(X, y)
    assert clf.score(X, y) > 0.9
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(X[:50])) <= set(clf.classes_)


def test_classifier_string_labels():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 1, (60, 2)), rng.normal(2, 1, (60, 2))])
    y = np.array(["cat"] * 60 + ["dog"] * 60)
    clf = FederatedClassifier(n_users=3, total_steps=100, batch_size=10).fit(X, y)
    assert clf.score(X, y) > 0.95


def test_predict_checks_feature_count():
    rng = np.random.default_rng(0)
    est = FederatedRegressor(n_users=2, total_steps=10).fit(rng.standard_normal((40, 3)), rng.standard_normal(40))
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 4)))


def test_mixture_regressor_beats_single_model():
    rng = np.random.default_rng(0)
    gens = make_cluster_generators(3, 3, rng, separation=4.0)
    pool = sample_clustered(gens, 200, rng)
    X, y, groups = pool.data.X, pool.data.y, pool.groups
    mix = MixtureRegressor(n_users=6, total_steps=200).fit(X, y, groups)
    single = FederatedRegressor(n_users=6, total_steps=200, lr="box").fit(X, y)
    assert mix.coef_.shape == (3, 3)
    assert np.mean((mix.predict(X) - y) ** 2) < np.mean((single.predict(X) - y) ** 2)
    with pytest.raises(ValueError):
        mix.fit(X, y, groups[:-1])
