import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpipe.channel import (
    LinkSpec, OtaSpec, Precoder, cotaf_alpha, gains_from_distances, link_rate, orthogonal_transmit, ota_decode,
    ota_mac, ota_precode,
)
from fedpipe.combining import UpdateBatch, fedavg_combine
from fedpipe.encoding import EncodedUpdate, LatticeSpec, ModelUpdate, dense_encode, uveqfed_encode
from fedpipe.exceptions import ChannelError, DimensionError


def test_link_rate_examples():
    assert link_rate(LinkSpec(1.0, 1.0, 1.0, 1.0), 0) == pytest.approx(1.0)
    assert link_rate(LinkSpec(2.0, 3.0, 1.0, 0.25, (0.5,)), 0) == pytest.approx(4.0)
    assert link_rate(LinkSpec(1.0, 1.0, 0.0, 1.0), 0) == 0.0


def test_link_rate_unbounded_is_error():
    with pytest.raises(ChannelError):
        link_rate(LinkSpec(1.0, 1.0, 1.0, 0.0, (0.0,)), 0)


def test_link_rate_picks_block_interference():
    link = LinkSpec(1.0, 1.0, 3.0, 0.0, (1.0, 3.0))
    assert link_rate(link, 0) == pytest.approx(2.0)
    assert link_rate(link, 1) == pytest.approx(1.0)


def test_gains_from_distances():
    np.testing.assert_allclose(gains_from_distances([1.0, 2.0]), [1.0, 0.25])
    with pytest.raises(ChannelError):
        gains_from_distances([0.0])


def _record(bits):
    e = dense_encode(ModelUpdate([1.0, -2.0], user_id=4, round=2))
    return EncodedUpdate(e.payload, bits, user_id=4, round=2)


def test_orthogonal_delay_and_lossless_payload():
    e = _record(1000)
    out, delay = orthogonal_transmit(e, 1000.0)
    assert delay == 1.0
    assert orthogonal_transmit(e, 2000.0)[1] == 0.5
    assert out.to_bytes() == e.to_bytes()
    lat = LatticeSpec.hexagonal(0.1)
    q = uveqfed_encode(ModelUpdate(np.arange(5.0)), lat, 3)
    assert orthogonal_transmit(q, 10.0)[0].to_bytes() == q.to_bytes()
    with pytest.raises(ChannelError):
        orthogonal_transmit(e, 0.0)


def test_cotaf_alpha_examples():
    assert cotaf_alpha(4.0, 16.0) == 0.25
    assert cotaf_alpha(3.0, 3.0) == 1.0
    with pytest.raises(ChannelError):
        cotaf_alpha(1.0, 0.0)


def test_precoder_alpha_non_decreasing_for_shrinking_norms():
    # replay: the estimate after round r is safety * max sqnorm of round r
    recorded = [[4.0, 3.0], [2.5, 2.0], [2.5, 1.0], [0.9, 0.3], [0.2, 0.1]]
    spec = OtaSpec(power=2.0, pilot_sqnorm=5.0, safety=1.1)
    pre = Precoder(spec)
    alphas = [pre.alpha()]
    for sq in recorded:
        pre.observe(sq)
        alphas.append(pre.alpha())
    expected = [2.0 / 5.0] + [2.0 / (1.1 * max(sq)) for sq in recorded]
    np.testing.assert_allclose(alphas, expected, rtol=1e-15)
    assert all(b >= a for a, b in zip(alphas, alphas[1:]))


def test_precoder_pilot_and_fixed_modes():
    pre = Precoder(OtaSpec(pilot_sqnorm=None))
    assert not pre.primed
    with pytest.raises(ChannelError):
        pre.alpha()
    pre.prime([2.0, 4.0])
    assert pre.alpha() == pytest.approx(1.0 / 4.4)
    fixed = Precoder(OtaSpec(precoder="fixed", pilot_sqnorm=2.0))
    first = fixed.alpha()
    fixed.observe([0.01])
    assert fixed.alpha() == first == 0.5
    assert Precoder(OtaSpec(precoder="fixed", fixed_alpha=3.0)).alpha() == 3.0


def test_precode_unfaded_and_truncation():
    u = ModelUpdate([1.0, -2.0])
    x, cut = ota_precode(u, 1.0, 1.0, OtaSpec())
    np.testing.assert_array_equal(x, u.delta)
    assert not cut
    spec = OtaSpec(gains=(0.5, 1e-4), inversion_threshold=1e-3)
    x, cut = ota_precode(u, 4.0, spec.gain(0), spec)
    np.testing.assert_allclose(x, 2.0 * u.delta / 0.5)
    x, cut = ota_precode(u, 4.0, spec.gain(1), spec)
    assert cut and not np.any(x)
    with pytest.raises(ChannelError):
        ota_precode(u, 0.0, 1.0, OtaSpec())


def test_precode_power_budget_monte_carlo():
    rng = np.random.default_rng(0)
    P, d, sigma = 2.0, 10, 0.3
    draws = sigma * rng.standard_normal((20_000, d))
    max_expected = d * sigma ** 2
    alpha = cotaf_alpha(P, max_expected)
    spec = OtaSpec(power=P)
    energy = np.mean([np.sum(ota_precode(ModelUpdate(u), alpha, 1.0, spec)[0] ** 2) for u in draws])
    assert energy <= P * 1.05
    assert energy == pytest.approx(P, rel=0.05)


def test_mac_noise_free_sum_and_identity():
    u1, u2 = np.array([1.0, 2.0]), np.array([-0.5, 4.0])
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(ota_mac([u1, u2], 0.0, rng).y, u1 + u2)
    np.testing.assert_array_equal(ota_mac([u1], 0.0, rng).y, u1)
    with pytest.raises(DimensionError):
        ota_mac([u1, np.zeros(3)], 0.0, rng)


def test_mac_noise_variance():
    y = ota_mac([np.zeros(100_000)], 0.25, np.random.default_rng(3)).y
    assert np.var(y) == pytest.approx(0.25, rel=0.03)


def test_decode_examples():
    u1, u2 = np.array([1.0, 3.0]), np.array([3.0, -1.0])
    np.testing.assert_allclose(ota_decode(u1 + u2, 1.0, 2, np.zeros(2)), (u1 + u2) / 2)
    np.testing.assert_allclose(ota_decode(u1, 1.0, 1, [5.0, 5.0]), u1 + 5.0)


def test_post_decode_noise_std():
    alpha, n, var = 4.0, 5, 0.09
    y = ota_mac([np.zeros(100_000)] * n, var, np.random.default_rng(8)).y
    theta = ota_decode(y, alpha, n, np.zeros(y.size))
    assert np.std(theta) == pytest.approx(math.sqrt(var) / (n * math.sqrt(alpha)), rel=0.03)


@given(st.integers(1, 6), st.floats(0.01, 100.0), st.integers(0, 2 ** 31))
def test_noise_free_ota_round_equals_uniform_fedavg(n, alpha, seed):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(4)
    deltas = rng.standard_normal((n, 4))
    spec = OtaSpec()
    inputs = [ota_precode(ModelUpdate(u), alpha, 1.0, spec)[0] for u in deltas]
    theta = ota_decode(ota_mac(inputs, 0.0, rng).y, alpha, n, ref)
    expected = fedavg_combine(UpdateBatch(deltas, np.full(n, 1.0 / n), ref))
    np.testing.assert_allclose(theta, expected, rtol=0, atol=1e-10)
