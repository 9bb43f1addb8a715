import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpipe._rng import substream
from fedpipe.exceptions import DimensionError, EmptyDatasetError, NonFiniteError
from fedpipe.model import (
    LearningRate, LocalDataset, LossSpec, TrainingSchedule, batch_indices, box_learning_rate, global_loss,
    hessian_bounds, init_params, local_loss, local_train, loss_gradient, minimize_loss, sgd_step, size_weights,
)
from oracles import finite_difference, logistic_loss_loop

SQ = LossSpec("squared-error")
QS = LossSpec("quadratic-synthetic")


def _regression(n=20, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    return LocalDataset(X, X @ rng.standard_normal(p) + 0.1 * rng.standard_normal(n))


def test_squared_error_exact_fit_is_zero():
    ds = LocalDataset([[1.0]], [2.0])
    assert local_loss([2.0], ds, SQ) == 0.0


def test_squared_error_at_origin():
    assert local_loss([0.0], LocalDataset([[1.0]], [2.0]), SQ) == 4.0


def test_logistic_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((10, 4))
    y = rng.integers(0, 3, size=10).astype(float)
    spec = LossSpec("logistic", reg=0.05, n_classes=3)
    theta = rng.standard_normal(spec.dim(4))
    expected = logistic_loss_loop(theta.reshape(5, 3), X, y, 0.05)
    assert local_loss(theta, LocalDataset(X, y), spec) == pytest.approx(expected, abs=1e-12)


def test_gradient_vanishes_at_closed_form_minimizer():
    ds = _regression()
    theta = minimize_loss(ds, QS)
    np.testing.assert_allclose(loss_gradient(theta, ds, QS), 0.0, atol=1e-12)


def test_squared_error_gradient_example():
    np.testing.assert_array_equal(loss_gradient([1.0], LocalDataset([[1.0]], [0.0]), SQ), [2.0])


@pytest.mark.parametrize("spec", [
    LossSpec("quadratic-synthetic", reg=0.1), LossSpec("squared-error"),
    LossSpec("logistic", reg=0.01, n_classes=3), LossSpec("mlp", reg=0.01, n_classes=3, hidden=4),
])
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(11)
    X = rng.standard_normal((8, 3))
    y = rng.integers(0, 3, size=8).astype(float) if spec.is_classifier else rng.standard_normal(8)
    ds = LocalDataset(X, y)
    theta = 0.5 * rng.standard_normal(spec.dim(3))
    fd = finite_difference(lambda th: local_loss(th, ds, spec), theta)
    np.testing.assert_allclose(loss_gradient(theta, ds, spec), fd, rtol=1e-5, atol=1e-7)


def test_sgd_step_fixed_point_and_newton_step():
    ds = LocalDataset([[1.0]], [0.0])
    # 0.5 * theta^2 is the quadratic-synthetic loss of a=1, b=0
    np.testing.assert_array_equal(sgd_step([1.0], ds, 1.0, QS), [0.0])
    np.testing.assert_array_equal(sgd_step([0.0], ds, 0.3, QS), [0.0])


def test_two_steps_replay():
    ds = _regression()
    theta = np.ones(3)
    b1, b2 = ds.subset([0, 1, 2]), ds.subset([3, 4, 5])
    two = sgd_step(sgd_step(theta, b1, 0.1, QS), b2, 0.05, QS)
    manual = theta - 0.1 * loss_gradient(theta, b1, QS)
    manual = manual - 0.05 * loss_gradient(manual, b2, QS)
    np.testing.assert_array_equal(two, manual)


def test_sgd_step_rejects_non_finite_gradient():
    ds = LocalDataset([[np.inf]], [0.0])
    with pytest.raises(NonFiniteError, match="non-finite gradient"):
        sgd_step([1.0], ds, 0.1, QS)


def test_sgd_step_rejects_bad_shape():
    with pytest.raises(DimensionError):
        sgd_step([1.0, 2.0], LocalDataset([[1.0]], [0.0]), 0.1, QS)


def test_local_train_zero_steps_is_identity():
    ds = _regression()
    sched = TrainingSchedule(local_steps=0, batch_size=4)
    theta = np.arange(3.0)
    np.testing.assert_array_equal(local_train(theta, ds, QS, sched, substream(0, "b")), theta)


def test_local_train_one_step_equals_sgd_step():
    ds = _regression()
    sched = TrainingSchedule(local_steps=1, batch_size=4, lr=LearningRate("constant", 0.2))
    idx = next(batch_indices(ds.n, 4, 1, substream(5, "b")))
    expected = sgd_step(np.zeros(3), ds.subset(idx), 0.2, QS)
    np.testing.assert_array_equal(local_train(np.zeros(3), ds, QS, sched, substream(5, "b")), expected)


def test_local_train_is_deterministic():
    ds = _regression()
    sched = TrainingSchedule(local_steps=5, batch_size=4, lr=LearningRate("constant", 0.1))
    a = local_train(np.zeros(3), ds, QS, sched, substream(9, "b", 1, 2))
    b = local_train(np.zeros(3), ds, QS, sched, substream(9, "b", 1, 2))
    assert a.tobytes() == b.tobytes()


def test_batches_cover_epoch_without_replacement():
    batches = list(batch_indices(10, 5, 2, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    with pytest.raises(ValueError):
        list(batch_indices(3, 5, 1, np.random.default_rng(0)))


def test_global_loss_single_user_and_identical_users():
    ds = _regression()
    theta = np.array([0.3, -0.2, 1.0])
    assert global_loss(theta, [ds], [1.0], QS) == local_loss(theta, ds, QS)
    assert global_loss(theta, [ds, ds], [0.3, 0.7], QS) == pytest.approx(local_loss(theta, ds, QS), abs=1e-15)


def test_global_loss_matches_pooled_data():
    parts = [_regression(n, seed=s) for s, n in enumerate([5, 9, 14])]
    theta = np.array([0.5, 1.0, -1.0])
    pooled = LocalDataset.concat(parts)
    assert global_loss(theta, parts, size_weights(parts), SQ) == pytest.approx(local_loss(theta, pooled, SQ), abs=1e-12)


def test_global_loss_rejects_bad_weights():
    ds = _regression()
    with pytest.raises(ValueError):
        global_loss(np.zeros(3), [ds, ds], [0.5, 0.6], QS)
    with pytest.raises(DimensionError):
        global_loss(np.zeros(3), [ds], [0.5, 0.5], QS)


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDatasetError):
        local_loss(np.zeros(2), LocalDataset(np.zeros((0, 2)), np.zeros(0)), QS)


def test_box_learning_rate():
    lr = box_learning_rate(L=2.0, mu=1.0, local_steps=5)
    assert lr.gamma == 16.0
    assert lr(0) == pytest.approx(2.0 / 16.0)
    assert lr(4) == pytest.approx(2.0 / 20.0)


def test_hessian_bounds_identity_design():
    ds = LocalDataset(np.eye(3) * np.sqrt(3.0), np.zeros(3))
    assert hessian_bounds(ds, SQ) == pytest.approx((2.0, 2.0))
    assert hessian_bounds(ds, QS) == pytest.approx((1.0, 1.0))


def test_init_params_shapes():
    assert init_params(LossSpec("logistic", n_classes=4), 6).shape == (28,)
    assert np.all(init_params(QS, 3) == 0)
    assert np.any(init_params(LossSpec("mlp", hidden=3), 2) != 0)


@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 2 ** 31))
def test_batches_have_requested_size_and_valid_indices(n, b, seed):
    b = min(b, n)
    for idx in batch_indices(n, b, 7, np.random.default_rng(seed)):
        assert idx.size == b and len(set(idx.tolist())) == b
        assert idx.min() >= 0 and idx.max() < n
