"""scikit-learn style wrappers around the federated runner.

``fit`` splits the training data among simulated users, runs the configured
federated procedure and keeps the final global model. Any config field can be
overridden through ``config`` as a mapping of dotted paths.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .combining import ClusterModelSet, mixture_predict
from .config import from_dict
from .model import LocalDataset, predict
from .orchestrator import run_experiment


class _FederatedBase(BaseEstimator):
    _loss = "squared-error"

    def __init__(self, n_users=10, local_steps=5, batch_size=10, total_steps=200, lr="constant", eta0=0.05,
                 reg=0.0, partition="iid", encoder="identity", combiner="fedavg", config=None, random_state=0):
        self.n_users = n_users
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.lr = lr
        self.eta0 = eta0
        self.reg = reg
        self.partition = partition
        self.encoder = encoder
        self.combiner = combiner
        self.config = config
        self.random_state = random_state

    def _config(self):
        cfg = from_dict({
            "n_users": self.n_users,
            "data": {"source": "arrays", "test_fraction": 0.0},
            "partition": {"kind": self.partition},
            "model": {"kind": self._loss, "reg": self.reg},
            "schedule": {"local_steps": self.local_steps, "batch_size": self.batch_size,
                         "total_steps": self.total_steps, "lr": self.lr, "eta0": self.eta0},
            "encoder": {"kind": self.encoder},
            "combiner": {"kind": self.combiner},
            "seeds": {"master": int(self.random_state or 0)},
        })
        return cfg.replace(**(self.config or {}))

    def _run(self, X, y):
        ds = LocalDataset(X, y)
        self.result_ = run_experiment(self._config(), write=False, train=ds, test=ds)
        self.coef_ = self.result_.thetas[0]
        self.history_ = self.result_.records
        self.n_features_in_ = X.shape[1]
        return self

    def _raw_predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict(self.coef_, X, self.result_.problem.spec)


class FederatedRegressor(RegressorMixin, _FederatedBase):
    """Linear least-squares model trained by simulated federated averaging."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._run(X, y.astype(float))

    def predict(self, X):
        return self._raw_predict(X)


class FederatedClassifier(ClassifierMixin, _FederatedBase):
    """Multinomial logistic regression (or an MLP with ``loss="mlp"``)."""

    def __init__(self, n_users=10, local_steps=5, batch_size=10, total_steps=200, lr="constant", eta0=0.1,
                 reg=1e-3, partition="iid", encoder="identity", combiner="fedavg", config=None, random_state=0,
                 loss="logistic"):
        super().__init__(n_users, local_steps, batch_size, total_steps, lr, eta0, reg, partition, encoder,
                         combiner, config, random_state)
        self.loss = loss

    @property
    def _loss(self):
        return self.loss

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self._labels = LabelEncoder().fit(y)
        self.classes_ = self._labels.classes_
        return self._run(X, self._labels.transform(y).astype(float))

    def predict_proba(self, X):
        proba = self._raw_predict(X)
        return proba[:, : len(self.classes_)]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class MixtureRegressor(RegressorMixin, _FederatedBase):
    """One federated model per known cluster, combined by density gating.

    ``fit`` takes the cluster id of every sample; users are assigned to
    clusters round-robin and each cluster's samples are split among its users.
    """

    def __init__(self, n_users=9, local_steps=5, batch_size=10, total_steps=200, lr="box", eta0=0.05, reg=0.0,
                 density_components=3, config=None, random_state=0):
        super().__init__(n_users, local_steps, batch_size, total_steps, lr, eta0, reg, "clustered", "identity",
                         "mixture", config, random_state)
        self.density_components = density_components

    def fit(self, X, y, clusters):
        X, y = check_X_y(X, y, y_numeric=True)
        clusters = np.asarray(clusters)
        if clusters.shape[0] != X.shape[0]:
            raise ValueError("clusters must give one id per sample")
        cfg = self._config().replace(**{"combiner.density_components": self.density_components})
        ds = LocalDataset(X, y.astype(float))
        self.result_ = run_experiment(cfg, write=False, train=ds, test=ds, train_groups=clusters)
        problem = self.result_.problem
        self.models_ = ClusterModelSet(list(self.result_.thetas), problem.densities, problem.spec)
        self.coef_ = np.stack(self.result_.thetas)
        self.history_ = self.result_.records
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "models_")
        return mixture_predict(check_array(X), self.models_)
