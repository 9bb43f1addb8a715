import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpipe.analysis import (
    BoundParams, MetricsRecord, cotaf_bound, cotaf_extra, estimate_bound_params, fedavg_bound, loglog_slope,
    metrics_csv, uveqfed_bound, uveqfed_extra,
)
from fedpipe.exceptions import FedPipeError
from fedpipe.model import LearningRate, LocalDataset, LossSpec, TrainingSchedule
from oracles import bound_calculator


def _bp(**kw):
    base = dict(L=1.0, mu=1.0, E=1, T=1, Gamma=0.0, G2=0.0, p=[1.0], sigma2=[0.0], init_dist=1.0)
    base.update(kw)
    return BoundParams(**base)


def test_fedavg_bound_spot_value():
    assert fedavg_bound(_bp()) == pytest.approx(0.5, abs=1e-15)


def test_fedavg_bound_matches_calculator():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu = float(rng.uniform(0.1, 2))
        L = mu * float(rng.uniform(1, 10))
        E, T = int(rng.integers(1, 10)), int(rng.integers(1, 5000))
        p = rng.dirichlet(np.ones(4))
        s2 = rng.uniform(0, 3, 4)
        Gm, G2, r0 = (float(v) for v in rng.uniform(0, 2, 3))
        bp = _bp(L=L, mu=mu, E=E, T=T, Gamma=Gm, G2=G2, p=p, sigma2=s2, init_dist=r0)
        assert fedavg_bound(bp) == pytest.approx(bound_calculator(L, mu, E, T, Gm, G2, p, s2, r0), rel=1e-12)


def test_bound_is_order_one_over_t():
    bp = _bp(L=2.0, sigma2=[1.0], G2=1.0, E=3)
    scaled = [fedavg_bound(bp.at(T)) * T for T in (10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7)]
    assert abs(scaled[-1] - scaled[-2]) < 1e-3 * scaled[-1]


def test_uveqfed_extra_examples():
    bp = _bp(E=2, p=[1.0], sigma2=[0.1], n_subvectors=10, zeta=2.0, lattice_moment=1 / 12)
    assert uveqfed_extra(bp) == pytest.approx(16 / 3)
    q = _bp(E=2, p=[0.5, 0.5], sigma2=[0.0, 0.0], n_subvectors=10, zeta=2.0, lattice_moment=1.0)
    assert uveqfed_extra(q) == 0.0
    tiny = _bp(E=2, sigma2=[0.1], n_subvectors=10, zeta=1e-9, lattice_moment=1 / 12)
    assert uveqfed_bound(tiny) == pytest.approx(fedavg_bound(tiny), rel=1e-12)
    with pytest.raises(ValueError):
        uveqfed_bound(_bp())


def test_cotaf_extra_examples():
    bp = _bp(E=1, G2=1.0, d=10, noise_var=1.0, power=1.0, n_users=2)
    assert cotaf_extra(bp) == pytest.approx(10.0)
    assert cotaf_extra(_bp(E=1, G2=1.0, d=10, noise_var=1.0, power=1.0, n_users=4)) == pytest.approx(2.5)
    silent = _bp(E=1, G2=1.0, d=10, noise_var=0.0, power=1.0, n_users=2)
    assert cotaf_bound(silent) == fedavg_bound(silent)


def test_bound_params_validation():
    with pytest.raises(ValueError):
        _bp(L=0.5, mu=1.0)
    with pytest.raises(ValueError):
        _bp(Gamma=-1.0)


pos = st.floats(0.0, 10.0)


@given(pos, pos, pos, pos, st.integers(1, 1000), st.integers(1, 10))
def test_bounds_monotone(s2, gam, g2, z, T, E):
    kw = dict(L=2.0, mu=0.5, E=E, Gamma=gam, G2=g2, p=[0.5, 0.5], sigma2=[s2, s2], n_subvectors=5, zeta=z,
              lattice_moment=0.1, d=5, noise_var=0.3, power=1.0, n_users=2)
    base = _bp(T=T, **kw)
    for fn in (fedavg_bound, uveqfed_bound, cotaf_bound):
        assert fn(base.at(T + 1)) <= fn(base)
        for name in ("Gamma", "G2", "zeta", "noise_var"):
            bumped = _bp(T=T, **{**kw, name: kw[name] + 1.0})
            assert fn(bumped) >= fn(base)
        assert fn(_bp(T=T, **{**kw, "sigma2": [s2 + 1, s2]})) >= fn(base)
    assert uveqfed_bound(base) >= fedavg_bound(base)
    assert cotaf_bound(base) >= fedavg_bound(base)


def _sched(E=2, B=2):
    return TrainingSchedule(local_steps=E, batch_size=B, lr=LearningRate("constant", 0.05), total_steps=10)


def test_estimate_identity_design_squared_error():
    ds = LocalDataset(np.eye(3) * math.sqrt(3.0), np.ones(3))
    bp = estimate_bound_params([ds], LossSpec("squared-error"), _sched(B=1), np.zeros(3), probe_rounds=2)
    assert bp.L == pytest.approx(2.0) and bp.mu == pytest.approx(2.0)


def test_estimate_identical_users_have_zero_heterogeneity():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    ds = LocalDataset(X, X @ np.ones(3) + 0.1 * rng.standard_normal(20))
    bp = estimate_bound_params([ds, ds, ds], LossSpec("quadratic-synthetic"), _sched(), np.zeros(3), probe_rounds=3)
    assert bp.Gamma == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(bp.p, [1 / 3] * 3)


def test_estimated_g2_covers_sampled_gradients():
    rng = np.random.default_rng(1)
    parts = []
    for s in range(3):
        X = rng.standard_normal((15, 2))
        parts.append(LocalDataset(X, X @ rng.standard_normal(2)))
    spec = LossSpec("quadratic-synthetic")
    bp = estimate_bound_params(parts, spec, _sched(), np.zeros(2), probe_rounds=3)
    assert bp.G2 == pytest.approx(1.2 * bp.sampled_sqnorm_max)
    assert bp.G2 >= bp.sampled_sqnorm_max > 0.0


def test_estimate_rejects_unsupported_loss():
    ds = LocalDataset(np.eye(2), np.array([0.0, 1.0]))
    with pytest.raises(FedPipeError):
        estimate_bound_params([ds], LossSpec("mlp", n_classes=2), _sched(B=1), np.zeros(10))


def test_metrics_csv_layout():
    recs = [MetricsRecord(1, 0.5, 100, 1.0, 1.1, 0.5, {"fedavg_bound": 3.0}),
            MetricsRecord(2, 1.0, 200, 0.9, 1.0, 0.6, {"fedavg_bound": 2.0})]
    text = metrics_csv(recs, ("fedavg_bound",))
    lines = text.splitlines()
    assert lines[0] == "round,delay_s,bits,train_loss,test_loss,test_acc,fedavg_bound"
    assert lines[2] == "2,1.0,200,0.9,1.0,0.6,2.0"
    with pytest.raises(ValueError):
        metrics_csv(recs[::-1])
    with pytest.raises(ValueError):
        MetricsRecord(1, -1.0, 0, 0.0, 0.0, 0.0)


def test_loglog_slope():
    x = np.array([1.0, 10.0, 100.0])
    assert loglog_slope(x, 3.0 / x) == pytest.approx(-1.0)
