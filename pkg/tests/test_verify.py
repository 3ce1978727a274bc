import numpy as np
import pytest

from conftest import tiny_net
from lmconv.conv import ConvParams, lmconv_forward
from lmconv.masks import build_mask_matrix, shared_weight_mask
from lmconv.net import Network
from lmconv.orders import raster_order, s_curve_order
from lmconv.verify import (blind_spot_report, causality_jacobian_check, distribution_sum_check,
                           format_reports, gradient_check, order_generalization_eval, run_all)
from test_conv import direct_conv


def corrupt(net, order, layer, bit_row, target):
    """Copy of ``net`` whose mask for ``layer`` has one extra bit set."""
    m = net.masks_for(order)[layer]
    bits = m.bits.copy()
    r, c = target
    bits[bit_row, r * net.config.width + c] = 1
    bad = Network(net.config, net.params)
    key = (order.key, "first" if m.is_first_layer else "deep", m.k1, m.k2, m.dilation, m.in_channels)
    bad.mask_cache._store[key] = m.with_bits(bits)
    return bad


@pytest.mark.parametrize("rule", [
    (0, 4, 1),  # first layer reading its own pixel
    (2, 5, 0),  # deep layer reading a right-hand neighbour that comes later
])
def test_injected_fault_is_found(rule):
    layer, row, i = rule
    o = raster_order(4, 4)
    net = tiny_net(depth=3)
    assert causality_jacobian_check(net, o).passed
    rep = causality_jacobian_check(corrupt(net, o, layer, row, o[i]), o)
    assert not rep.passed
    assert rep.details["layer"] == layer
    assert rep.details["violations"] >= 1


def test_padding_bits_are_harmless():
    o = raster_order(4, 4)
    net = tiny_net(depth=2)
    # patch row 0 at (0, 0) references (-1, -1): outside the image
    rep = causality_jacobian_check(corrupt(net, o, 0, 0, (0, 0)), o)
    assert rep.passed


def test_raster_masks_reduce_to_shared_weight_masks(rng):
    """A raster order with local masks is a PixelCNN-style convolution with masked weights."""
    for first in (True, False):
        m = build_mask_matrix(raster_order(5, 6), 2, 3, 3, 1, first)
        w = rng.standard_normal((3, 18))
        b = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, 5, 6))
        wm = w * np.tile(shared_weight_mask(3, 3, first).ravel(), 2)
        assert np.allclose(lmconv_forward(x, m, ConvParams(w, b)), direct_conv(x, wm, b, 3, 3, 1),
                           atol=1e-12)


def test_blind_spot_report():
    s = blind_spot_report(s_curve_order(4, 4), 3, [1] * 16)
    assert s.passed and s.details["blind_spots"] == 0
    r = blind_spot_report(raster_order(4, 4), 3, [1] * 16)
    assert not r.passed and not r.gating
    # bottom-left pixel of a raster scan never sees the far right of the row above it
    assert r.missing.any()
    assert r.coverage[0, 0] == 0 and r.coverage.shape == (4, 4)


def test_distribution_sum_and_gradients(rng):
    net = tiny_net(2, 2, depth=2, mask_conditioning=True)
    assert distribution_sum_check(net, s_curve_order(2, 2)).passed
    rep = gradient_check(net, rng.integers(0, 2, (3, 1, 2, 2)), s_curve_order(2, 2, 1))
    assert rep.passed, rep.details


def test_order_generalization_report(rng):
    net = tiny_net()
    data = rng.integers(0, 2, (10, 1, 4, 4))
    rep = order_generalization_eval(net, data, [s_curve_order(4, 4, v) for v in range(7)], s_curve_order(4, 4, 7))
    assert float(rep.details["ratio"]) > 0
    assert rep.passed == (float(rep.details["ratio"]) < 1.25)


def test_run_all_is_deterministic_and_formatted():
    net = tiny_net(3, 3, depth=2)
    orders = [s_curve_order(3, 3, 2), raster_order(3, 3)]
    a = format_reports(run_all(net, orders, seed=4))
    b = format_reports(run_all(net, orders, seed=4))
    assert a == b
    assert a.splitlines()[-1] == "overall=pass"
    assert all("=" in line for line in a.splitlines())
