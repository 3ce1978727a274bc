import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmconv.conv import (ConvContext, ConvParams, col2im, im2col, lmconv_backward, lmconv_forward,
                         lmconv_forward_ctx)
from lmconv.errors import ContractViolation, InvalidArgument, NumericFailure
from lmconv.masks import build_mask_matrix, ones_mask
from lmconv.orders import hilbert_order, s_curve_order


def direct_conv(x, weight, bias, k1, k2, d):
    """Sliding-window convolution with zero 'same' padding, one output at a time."""
    b, c, h, w = x.shape
    cout = weight.shape[0]
    wk = weight.reshape(cout, c, k1, k2)
    y = np.zeros((b, cout, h, w))
    for r in range(h):
        for q in range(w):
            acc = np.tile(bias, (b, 1)).astype(float)
            for i in range(k1):
                for j in range(k2):
                    sr, sc = r + d * (i - k1 // 2), q + d * (j - k2 // 2)
                    if 0 <= sr < h and 0 <= sc < w:
                        acc += x[:, :, sr, sc] @ wk[:, :, i, j].T
            y[:, :, r, q] = acc
    return y


def masked_dot(x, mask, params):
    """Each output location is a dot product with its own masked patch."""
    b, c, h, w = x.shape
    k1, k2, d = mask.k1, mask.k2, mask.dilation
    y = np.zeros((b, params.weight.shape[0], h, w))
    for r in range(h):
        for q in range(w):
            patch = np.zeros((b, c * k1 * k2))
            for ch in range(c):
                for i in range(k1):
                    for j in range(k2):
                        sr, sc = r + d * (i - k1 // 2), q + d * (j - k2 // 2)
                        if 0 <= sr < h and 0 <= sc < w:
                            patch[:, ch * k1 * k2 + i * k2 + j] = x[:, ch, sr, sc]
            patch *= mask.bits[:, w * r + q]
            out = patch @ params.weight.T + params.bias
            if params.mask_weight is not None:
                out += params.mask_weight @ mask.block[:, w * r + q]
            y[:, :, r, q] = out
    return y


def rand_params(rng, cout, cin, kk, cond=False):
    return ConvParams(rng.standard_normal((cout, cin * kk)), rng.standard_normal(cout),
                      rng.standard_normal((cout, kk)) if cond else None)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6),
       st.sampled_from([1, 3, 5]), st.sampled_from([1, 3]), st.integers(1, 3), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_all_ones_mask_is_plain_convolution(b, c, h, w, k1, k2, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, h, w))
    p = rand_params(rng, 2, c, k1 * k2)
    y = lmconv_forward(x, ones_mask(c, k1, k2, h, w, d), p)
    assert np.max(np.abs(y - direct_conv(x, p.weight, p.bias, k1, k2, d))) < 1e-10


@pytest.mark.parametrize("cond", [False, True])
@pytest.mark.parametrize("first", [False, True])
def test_local_masks_match_per_location_oracle(cond, first, rng):
    o = hilbert_order(5, 4, 3)
    m = build_mask_matrix(o, 2, 3, 3, 2, first)
    p = rand_params(rng, 3, 2, 9, cond)
    x = rng.standard_normal((2, 2, 5, 4))
    assert np.allclose(lmconv_forward(x, m, p), masked_dot(x, m, p), atol=1e-12, rtol=0)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 2), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_col2im_is_adjoint_of_im2col(c, h, w, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, h, w))
    g = rng.standard_normal((2, c * 9, h * w))
    lhs = np.sum(im2col(x, 3, 3, d) * g)
    rhs = np.sum(x * col2im(g, x.shape, 3, 3, d))
    assert abs(lhs - rhs) < 1e-10 * max(1, abs(lhs))


def test_col2im_round_trip_counts_overlaps():
    x = np.ones((1, 1, 4, 4))
    counts = col2im(im2col(x, 3, 3, 1), x.shape, 3, 3, 1)
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    assert np.array_equal(counts[0, 0], expected)


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("first", [True, False])
def test_backward_matches_finite_differences(first, rng):
    o = s_curve_order(4, 3, 5)
    m = build_mask_matrix(o, 2, 3, 3, 1, first)
    p = rand_params(rng, 3, 2, 9, cond=True)
    x = rng.standard_normal((2, 2, 4, 3))
    gy = rng.standard_normal((2, 3, 4, 3))

    def f():
        return float(np.sum(lmconv_forward(x, m, p) * gy))

    _, ctx = lmconv_forward_ctx(x, m, p)
    g = lmconv_backward(gy, ctx)
    assert rel(g.x, numeric_grad(f, x)) < 1e-7
    assert rel(g.weight, numeric_grad(f, p.weight)) < 1e-7
    assert rel(g.bias, numeric_grad(f, p.bias)) < 1e-7
    assert rel(g.mask_weight, numeric_grad(f, p.mask_weight)) < 1e-7


def test_masked_inputs_get_no_gradient(rng):
    o = s_curve_order(3, 3)
    m = build_mask_matrix(o, 1, 3, 3, 1, True)
    p = rand_params(rng, 2, 1, 9)
    x = rng.standard_normal((1, 1, 3, 3))
    _, ctx = lmconv_forward_ctx(x, m, p)
    gy = np.zeros((1, 2, 3, 3))
    r, c = o[0]
    gy[0, :, r, c] = 1.0  # first pixel reads nothing
    assert not lmconv_backward(gy, ctx).x.any()


def test_recompute_and_store_are_bit_identical(rng):
    m = build_mask_matrix(hilbert_order(6, 5), 4, 3, 3, 2, False)
    p = rand_params(rng, 5, 4, 9, cond=True)
    x = rng.standard_normal((3, 4, 6, 5))
    gy = rng.standard_normal((3, 5, 6, 5))
    y1, c1 = lmconv_forward_ctx(x, m, p, store_patches=False)
    y2, c2 = lmconv_forward_ctx(x, m, p, store_patches=True)
    assert np.array_equal(y1, y2)
    for a, b in zip(lmconv_backward(gy, c1), lmconv_backward(gy, c2)):
        assert np.array_equal(a, b)


def test_recompute_context_holds_no_patch_matrix(rng):
    m = build_mask_matrix(s_curve_order(16, 16), 8, 3, 3, 1, False)
    p = rand_params(rng, 8, 8, 9)
    x = rng.standard_normal((4, 8, 16, 16))
    _, lean = lmconv_forward_ctx(x, m, p)
    _, fat = lmconv_forward_ctx(x, m, p, store_patches=True)
    assert lean.patches is None
    assert fat.nbytes - lean.nbytes == x.nbytes * 9
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    y, ctx = lmconv_forward_ctx(x, m, p)
    kept = tracemalloc.get_traced_memory()[0] - base - y.nbytes
    tracemalloc.stop()
    assert kept < x.nbytes  # the 9x-larger patch matrix is gone


def test_contracts(rng):
    m = build_mask_matrix(s_curve_order(3, 3), 1, 3, 3)
    p = rand_params(rng, 2, 1, 9)
    with pytest.raises(ContractViolation):
        lmconv_backward(np.zeros((1, 2, 3, 3)), None)
    with pytest.raises(InvalidArgument):
        lmconv_forward(np.zeros((1, 2, 3, 3)), m, p)
    with pytest.raises(NumericFailure):
        lmconv_forward(np.full((1, 1, 3, 3), np.nan), ones_mask(1, 3, 3, 3, 3), p)
    _, ctx = lmconv_forward_ctx(np.zeros((1, 1, 3, 3)), m, p)
    with pytest.raises(InvalidArgument):
        lmconv_backward(np.zeros((1, 3, 3, 3)), ctx)
    assert isinstance(ctx, ConvContext)
