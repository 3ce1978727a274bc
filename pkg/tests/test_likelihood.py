import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_net
from lmconv.errors import InvalidArgument
from lmconv.likelihood import (LN2, MixtureParams, binary_log_prob, bits_per_dim, dlm_log_prob,
                               dlm_log_prob_grad, ensemble_nll, joint_bpd, joint_nll, log_sigmoid_diff,
                               sequential_nll)
from lmconv.net import ModelConfig, Network
from lmconv.orders import hilbert_order, raster_order, s_curve_order
from lmconv.verify import relative_error

mpmath.mp.dps = 60


def mp_log_sigmoid_diff(a, b):
    sa = mpmath.mpf(1) if a == math.inf else 1 / (1 + mpmath.exp(-mpmath.mpf(a)))
    sb = mpmath.mpf(0) if b == -math.inf else 1 / (1 + mpmath.exp(-mpmath.mpf(b)))
    return float(mpmath.log(sa - sb))


@pytest.mark.parametrize("a,b", [
    (0.5, -0.5), (40.0, 39.99), (-40.0, -40.01), (800.0, 799.0), (-750.0, -751.0),
    (1e-8, -1e-8), (math.inf, 30.0), (-30.0, -math.inf), (math.inf, -20.0), (3.0, -math.inf),
])
def test_log_sigmoid_diff_against_high_precision(a, b):
    got = float(log_sigmoid_diff(a, b))
    want = mp_log_sigmoid_diff(a, b)
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def random_mixture(rng, n, c, k, coupled):
    return MixtureParams(rng.standard_normal((n, k)), rng.uniform(-1, 1, (n, c, k)),
                         rng.uniform(-4, 0.5, (n, c, k)),
                         rng.standard_normal((n, 3, k)) if coupled else None)


@given(st.integers(1, 6), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_grayscale_mixture_normalises_over_256_bins(k, seed):
    rng = np.random.default_rng(seed)
    p = random_mixture(rng, 1, 1, k, False)
    rep = MixtureParams(*(np.repeat(t, 256, axis=0) for t in (p.logits, p.means, p.log_scales)), None)
    lp = dlm_log_prob(rep, np.arange(256)[:, None], 8)
    assert abs(np.exp(lp).sum() - 1) < 1e-10


def test_rgb_mixture_normalises_with_coupling(rng):
    bits = 3
    p = random_mixture(rng, 1, 3, 4, True)
    v = np.array(list(itertools.product(range(8), repeat=3)))
    rep = MixtureParams(*(np.repeat(t, len(v), axis=0) for t in (p.logits, p.means, p.log_scales, p.coeffs)))
    assert abs(np.exp(dlm_log_prob(rep, v, bits)).sum() - 1) < 1e-12


def test_mixture_matches_direct_cdf_oracle(rng):
    """Straight CDF differences, fine wherever nothing cancels."""
    p = random_mixture(rng, 20, 1, 3, False)
    v = rng.integers(0, 256, (20, 1))
    x = 2 * v / 255 - 1
    sig = lambda t: 1 / (1 + np.exp(-t))  # noqa: E731
    s = np.exp(p.log_scales[:, 0])
    hi = np.where(v == 255, 1.0, sig((x + 1 / 255 - p.means[:, 0]) / s))
    lo = np.where(v == 0, 0.0, sig((x - 1 / 255 - p.means[:, 0]) / s))
    w = np.exp(p.logits) / np.exp(p.logits).sum(1, keepdims=True)
    want = np.log((w * (hi - lo)).sum(1))
    assert np.allclose(dlm_log_prob(p, v, 8), want, rtol=0, atol=1e-10)


def test_log_scale_is_clamped(rng):
    p = random_mixture(rng, 5, 1, 2, False)
    v = rng.integers(0, 256, (5, 1))
    a = MixtureParams(p.logits, p.means, np.full_like(p.log_scales, -7.0), None)
    b = MixtureParams(p.logits, p.means, np.full_like(p.log_scales, -30.0), None)
    assert np.array_equal(dlm_log_prob(a, v), dlm_log_prob(b, v))
    g = dlm_log_prob_grad(b, v, 8, np.ones(5))
    assert not g.log_scales.any()


def test_sharp_component_concentrates_on_its_bin():
    means = np.full((1, 1, 1), 2 * 100 / 255 - 1)
    p = MixtureParams(np.zeros((1, 1)), means, np.full((1, 1, 1), -7.0), None)
    near = float(np.exp(dlm_log_prob(p, np.array([[100]])))[0])
    assert near > 0.97
    far = float(dlm_log_prob(p, np.array([[180]]))[0])
    assert np.isfinite(far) and far < -100  # tiny but still a finite log-probability


def test_mixture_gradient_matches_finite_differences(rng):
    p = random_mixture(rng, 6, 3, 3, True)
    v = rng.integers(0, 32, (6, 3))
    v[0] = 0
    v[1] = 31
    up = rng.standard_normal(6)
    g = dlm_log_prob_grad(p, v, 5, up)
    h = 1e-6
    for name in ("logits", "means", "log_scales", "coeffs"):
        arr = getattr(p, name)
        num = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            fp = np.sum(up * dlm_log_prob(p, v, 5))
            arr.flat[i] = old - h
            fm = np.sum(up * dlm_log_prob(p, v, 5))
            arr.flat[i] = old
            num.flat[i] = (fp - fm) / (2 * h)
        assert relative_error(getattr(g, name), num) < 1e-6, name


def test_intensity_range_checked(rng):
    p = random_mixture(rng, 1, 1, 1, False)
    with pytest.raises(InvalidArgument):
        dlm_log_prob(p, np.array([[256]]), 8)
    with pytest.raises(InvalidArgument):
        binary_log_prob(np.zeros((1, 2)), np.array([2]))


def test_binary_log_prob():
    logits = np.array([[0.0, 0.0], [1.0, 3.0], [-200.0, 200.0]])
    lp = binary_log_prob(logits, np.array([1, 0, 0]))
    assert np.allclose(lp, [-LN2, 1 - np.logaddexp(1, 3), -400.0])


def test_sequential_equals_parallel(rng):
    for seed, order in enumerate([raster_order(3, 4), s_curve_order(3, 4, 2), hilbert_order(3, 4, 7)]):
        net = tiny_net(3, 4, seed=seed, mask_conditioning=seed == 1)
        x = rng.integers(0, 2, (3, 1, 3, 4))
        assert np.max(np.abs(joint_nll(net, x, order) - sequential_nll(net, x, order))) < 1e-9


def test_sequential_equals_parallel_logistic(rng):
    net = tiny_net(2, 3, channels=3, head="logistic", n_mix=2, bits=4)
    x = rng.integers(0, 16, (2, 3, 2, 3))
    o = s_curve_order(2, 3, 5)
    assert np.max(np.abs(joint_nll(net, x, o) - sequential_nll(net, x, o))) < 1e-9


def test_ensemble_is_bounded_by_members(rng):
    net = tiny_net(4, 4, depth=3)
    x = rng.integers(0, 2, (10, 1, 4, 4))
    orders = [s_curve_order(4, 4, v) for v in range(8)]
    members = np.stack([joint_nll(net, x, o) for o in orders])
    ens = ensemble_nll(net, x, orders)
    assert (ens <= members.mean(0) + 1e-9).all()
    assert (ens >= members.min(0) - 1e-9).all()
    assert (ens <= members.min(0) + math.log(8) + 1e-9).all()
    assert np.allclose(ensemble_nll(net, x, orders[:1] * 3), members[0])


def test_bits_per_dim_of_uniform_bytes_is_exactly_eight():
    dims = 3 * 32 * 32
    assert bits_per_dim(dims * math.log(256), dims) == 8.0


def test_near_uniform_network_reports_eight_bpd(rng):
    """256 sharp components, one per bin, with equal weights and no input dependence."""
    cfg = ModelConfig(height=4, width=4, hidden=4, depth=1, dilations=(1,), head="logistic", n_mix=256)
    net = Network(cfg, seed=0)
    net.params["head.weight"][:] = 0
    bias = net.params["head.bias"]
    bias[:] = 0
    bias[256:512] = 2 * np.arange(256) / 255 - 1
    bias[512:] = -7.0
    x = rng.integers(0, 256, (64, 1, 4, 4))
    bpd = joint_bpd(net, x, s_curve_order(4, 4))
    assert np.all(np.round(bpd, 2) == 8.00)
