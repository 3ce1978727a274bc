"""Per-pixel output distributions and image likelihoods.

Two heads are provided: a two-way softmax for binary images and a
discretized logistic mixture for images with ``2**bits`` intensity levels.
Every head maps the network's ``(B, P, H, W)`` output to a log-probability
per pixel and back-propagates a per-pixel weight to that output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgument, Unsupported

LOG_SCALE_MIN = -7.0
LN2 = math.log(2.0)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _log1mexp(z):
    """``log(1 - exp(z))`` for ``z <= 0``."""
    with np.errstate(divide="ignore"):
        return np.where(z > -LN2, np.log(-np.expm1(np.minimum(z, -1e-300))), np.log1p(-np.exp(z)))


def log_sigmoid_diff(a, b):
    """``log(sigmoid(a) - sigmoid(b))`` for ``a > b``; ``a`` may be ``+inf``
    and ``b`` may be ``-inf``.

    Uses ``sigmoid(a) - sigmoid(b) = sigmoid(a) * sigmoid(-b) * (1 - exp(b - a))``,
    which never subtracts two nearly equal numbers.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        gap = np.where(np.isinf(a) | np.isinf(b), -np.inf, b - a)
    return log_sigmoid(a) + log_sigmoid(-b) + _log1mexp(gap)


def log_sigmoid_diff_grad(a, b, value):
    """Partial derivatives of :func:`log_sigmoid_diff` w.r.t. ``a`` and ``b``."""
    with np.errstate(invalid="ignore", over="ignore"):
        la = log_sigmoid(a) + log_sigmoid(-a)
        lb = log_sigmoid(b) + log_sigmoid(-b)
        ga = np.where(np.isfinite(a), np.exp(la - value), 0.0)
        gb = np.where(np.isfinite(b), -np.exp(lb - value), 0.0)
    return ga, gb


def log_softmax(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def to_unit_interval(v, bits):
    """Integer intensities in ``[0, 2**bits)`` to bin centres in ``[-1, 1]``."""
    return 2.0 * np.asarray(v, dtype=np.float64) / (2 ** bits - 1) - 1.0


@dataclass
class MixtureParams:
    """Discretized logistic mixture parameters for ``N`` pixels.

    ``log_scales`` are raw values; they are clamped at ``LOG_SCALE_MIN`` when
    used. ``coeffs`` holds the raw (pre-tanh) linear couplings of green on red
    and blue on red and green for 3-channel images.
    """

    logits: np.ndarray  # (N, K)
    means: np.ndarray  # (N, C, K)
    log_scales: np.ndarray  # (N, C, K)
    coeffs: Optional[np.ndarray] = None  # (N, 3, K)

    @property
    def n_mix(self):
        return self.logits.shape[-1]

    @property
    def channels(self):
        return self.means.shape[1]


def _effective_means(params: MixtureParams, xs):
    """Component means after sub-pixel coupling; ``xs`` is (N, C) in [-1, 1]."""
    mu = params.means.copy()
    tanh_c = None
    if params.coeffs is not None:
        tanh_c = np.tanh(params.coeffs)
        mu[:, 1] += tanh_c[:, 0] * xs[:, 0:1]
        mu[:, 2] += tanh_c[:, 1] * xs[:, 0:1] + tanh_c[:, 2] * xs[:, 1:2]
    return mu, tanh_c


def _check_intensities(v, bits):
    v = np.asarray(v)
    if v.size and (v.min() < 0 or v.max() > 2 ** bits - 1):
        raise InvalidArgument(f"intensity outside [0, {2 ** bits - 1}]")
    return v


def _dlm_terms(params: MixtureParams, v, bits):
    v = _check_intensities(v, bits)
    top = 2 ** bits - 1
    half_bin = 1.0 / top
    xs = to_unit_interval(v, bits)
    mu, tanh_c = _effective_means(params, xs)
    raw = params.log_scales
    ls = np.maximum(raw, LOG_SCALE_MIN)
    inv = np.exp(-ls)
    centred = xs[:, :, None] - mu
    a = inv * (centred + half_bin)
    b = inv * (centred - half_bin)
    a = np.where((v == top)[:, :, None], np.inf, a)
    b = np.where((v == 0)[:, :, None], -np.inf, b)
    lp = log_sigmoid_diff(a, b)
    logw = log_softmax(params.logits)
    z = logw + lp.sum(axis=1)
    return dict(xs=xs, tanh_c=tanh_c, inv=inv, centred=centred, a=a, b=b, lp=lp, logw=logw, z=z,
                half_bin=half_bin)


def dlm_log_prob(params: MixtureParams, v, bits: int = 8) -> np.ndarray:
    """Log-probability of integer pixels ``v`` (N, C) under the mixture.

    Interior bins integrate the logistic over ``[x - 1/(2**bits-1), x + 1/(2**bits-1)]``;
    the first and last bins extend to minus and plus infinity.
    """
    t = _dlm_terms(params, v, bits)
    return logsumexp(t["z"], axis=-1)


def dlm_log_prob_grad(params: MixtureParams, v, bits: int, upstream) -> MixtureParams:
    """Gradient of ``sum(upstream * dlm_log_prob(params, v))`` as a :class:`MixtureParams`."""
    t = _dlm_terms(params, v, bits)
    total = logsumexp(t["z"], axis=-1)
    g = np.asarray(upstream, dtype=np.float64)
    resp = np.exp(t["z"] - total[:, None])
    d_logits = g[:, None] * (resp - np.exp(t["logw"]))
    d_lp = (g[:, None] * resp)[:, None, :]
    ga, gb = log_sigmoid_diff_grad(t["a"], t["b"], t["lp"])
    da, db = d_lp * ga, d_lp * gb
    inv, centred, hb = t["inv"], t["centred"], t["half_bin"]
    d_mu = -inv * (da + db)
    d_inv = da * (centred + hb) + db * (centred - hb)
    d_raw_ls = -d_inv * inv * (params.log_scales > LOG_SCALE_MIN)
    d_coeffs = None
    if params.coeffs is not None:
        xs, tc = t["xs"], t["tanh_c"]
        d_tanh = np.zeros_like(params.coeffs)
        d_tanh[:, 0] = d_mu[:, 1] * xs[:, 0:1]
        d_tanh[:, 1] = d_mu[:, 2] * xs[:, 0:1]
        d_tanh[:, 2] = d_mu[:, 2] * xs[:, 1:2]
        d_coeffs = d_tanh * (1.0 - tc ** 2)
    return MixtureParams(d_logits, d_mu, d_raw_ls, d_coeffs)


def dlm_sample(params: MixtureParams, rng: np.random.Generator, bits: int = 8, temperature: float = 1.0):
    """Draw integer pixels (N, C): pick a component, then sample each channel
    from its logistic (scale multiplied by ``temperature``) and round to the
    nearest bin, clipping the tails onto the edge bins."""
    n, c, k = params.means.shape
    top = 2 ** bits - 1
    gumbel = -np.log(-np.log(rng.uniform(1e-12, 1.0 - 1e-12, size=(n, k))))
    comp = np.argmax(params.logits + gumbel, axis=1)
    rows = np.arange(n)
    out = np.zeros((n, c), dtype=np.int64)
    xs = np.zeros((n, c))
    tanh_c = np.tanh(params.coeffs[rows, :, comp]) if params.coeffs is not None else None
    for ch in range(c):
        mu = params.means[rows, ch, comp]
        if tanh_c is not None and ch == 1:
            mu = mu + tanh_c[:, 0] * xs[:, 0]
        elif tanh_c is not None and ch == 2:
            mu = mu + tanh_c[:, 1] * xs[:, 0] + tanh_c[:, 2] * xs[:, 1]
        s = np.exp(np.maximum(params.log_scales[rows, ch, comp], LOG_SCALE_MIN)) * temperature
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=n)
        x = np.clip(mu + s * (np.log(u) - np.log1p(-u)), -1.0, 1.0)
        out[:, ch] = np.clip(np.rint((x + 1.0) / 2.0 * top), 0, top).astype(np.int64)
        xs[:, ch] = to_unit_interval(out[:, ch], bits)
    return out


def binary_log_prob(logits, v) -> np.ndarray:
    """``log softmax(logits)[v]`` for logits (N, 2) and ``v`` in {0, 1}."""
    v = np.asarray(v)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise InvalidArgument("binary pixels must be 0 or 1")
    lsm = log_softmax(np.asarray(logits, dtype=np.float64))
    return np.take_along_axis(lsm, v.reshape(-1, 1).astype(np.int64), axis=1)[:, 0]


class BinaryHead:
    """Two logits per pixel; model input is ``2*x - 1``."""

    kind = "binary"

    def __init__(self, channels: int = 1):
        if channels != 1:
            raise Unsupported("the binary head models single-channel images")
        self.channels = 1
        self.levels = 2
        self.n_outputs = 2

    def model_input(self, x):
        return 2.0 * np.asarray(x, dtype=np.float64) - 1.0

    def pixel_log_prob(self, out, v):
        """``out`` (N, 2) and ``v`` (N, 1) -> (N,)."""
        return binary_log_prob(out, v[:, 0])

    def pixel_grad(self, out, v, upstream):
        p = np.exp(log_softmax(out))
        onehot = np.zeros_like(out)
        onehot[np.arange(len(v)), v[:, 0].astype(np.int64)] = 1.0
        return upstream[:, None] * (onehot - p)

    def sample_pixel(self, out, rng, temperature=1.0):
        p1 = 1.0 / (1.0 + np.exp(-(out[:, 1] - out[:, 0]) / temperature))
        return (rng.uniform(size=len(out)) < p1).astype(np.int64)[:, None]


class LogisticMixtureHead:
    """Discretized logistic mixture with ``n_mix`` components.

    Output layout per pixel: ``K`` mixture logits, ``C*K`` means, ``C*K`` raw
    log-scales and, for RGB, ``3*K`` raw coupling coefficients.
    """

    kind = "logistic"

    def __init__(self, channels: int = 1, n_mix: int = 10, bits: int = 8):
        if n_mix < 1:
            raise InvalidArgument("n_mix must be at least 1")
        if not 1 <= bits <= 16:
            raise InvalidArgument("bits must be in [1, 16]")
        self.channels = channels
        self.n_mix = n_mix
        self.bits = bits
        self.levels = 2 ** bits
        self.coupled = channels == 3
        self.n_outputs = n_mix * (1 + 2 * channels + (3 if self.coupled else 0))

    def model_input(self, x):
        return to_unit_interval(x, self.bits)

    def unpack(self, out) -> MixtureParams:
        k, c = self.n_mix, self.channels
        n = out.shape[0]
        logits = out[:, :k]
        means = out[:, k: k + c * k].reshape(n, c, k)
        ls = out[:, k + c * k: k + 2 * c * k].reshape(n, c, k)
        coeffs = out[:, k + 2 * c * k:].reshape(n, 3, k) if self.coupled else None
        return MixtureParams(logits, means, ls, coeffs)

    def pack(self, p: MixtureParams):
        parts = [p.logits, p.means.reshape(len(p.logits), -1), p.log_scales.reshape(len(p.logits), -1)]
        if self.coupled:
            parts.append(p.coeffs.reshape(len(p.logits), -1))
        return np.concatenate(parts, axis=1)

    def pixel_log_prob(self, out, v):
        return dlm_log_prob(self.unpack(out), v, self.bits)

    def pixel_grad(self, out, v, upstream):
        return self.pack(dlm_log_prob_grad(self.unpack(out), v, self.bits, upstream))

    def sample_pixel(self, out, rng, temperature=1.0):
        return dlm_sample(self.unpack(out), rng, self.bits, temperature)


def make_head(kind: str, channels: int, n_mix: int = 10, bits: int = 8):
    if kind == "binary":
        return BinaryHead(channels)
    if kind == "logistic":
        return LogisticMixtureHead(channels, n_mix, bits)
    raise InvalidArgument(f"unknown head kind {kind!r}")


def _flatten_pixels(t):
    """(B, P, H, W) -> (B*H*W, P)."""
    b, p, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(b * h * w, p)


def _unflatten_pixels(t, b, h, w):
    return t.reshape(b, h, w, -1).transpose(0, 3, 1, 2)


def pixel_log_probs(head, out, x) -> np.ndarray:
    """Log-probability of every pixel of ``x`` (B, C, H, W) -> (B, H, W)."""
    b, _, h, w = out.shape
    lp = head.pixel_log_prob(_flatten_pixels(out), _flatten_pixels(np.asarray(x)))
    return lp.reshape(b, h, w)


def pixel_log_prob_grad(head, out, x, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * pixel_log_probs(head, out, x))`` w.r.t. ``out``."""
    b, _, h, w = out.shape
    g = head.pixel_grad(_flatten_pixels(out), _flatten_pixels(np.asarray(x)), np.asarray(upstream).reshape(-1))
    return _unflatten_pixels(g, b, h, w)


def bits_per_dim(nats, dims):
    return np.asarray(nats) / (dims * LN2)


def joint_nll(net, x, order) -> np.ndarray:
    """Negative log-likelihood in nats of each image in ``x`` under ``order``,
    from one parallel forward pass."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != net.config.image_shape:
        raise InvalidArgument(f"image batch shape {x.shape} does not match model {net.config.image_shape}")
    out = net.forward(net.head.model_input(x), net.masks_for(order))
    return -pixel_log_probs(net.head, out, x).sum(axis=(1, 2))


def joint_bpd(net, x, order) -> np.ndarray:
    return bits_per_dim(joint_nll(net, x, order), net.config.dims)


def ensemble_nll(net, x, orders) -> np.ndarray:
    """``-log mean_k exp(-nll_k)``: the likelihood of the uniform mixture over orders."""
    orders = list(orders)
    if not orders:
        raise InvalidArgument("ensemble needs at least one order")
    nlls = np.stack([joint_nll(net, x, o) for o in orders])
    return -(logsumexp(-nlls, axis=0) - math.log(len(orders)))


def sequential_nll(net, x, order) -> np.ndarray:
    """Joint NLL as a sum of conditionals, one forward pass per pixel.

    Pixel ``order[i]`` is scored with every pixel at or after position ``i``
    zeroed in the model input, so only its parents are ever visible.
    """
    x = np.asarray(x)
    inp = net.head.model_input(x)
    masks = net.masks_for(order)
    total = np.zeros(x.shape[0])
    visible = np.zeros(x.shape[2:], dtype=bool)
    for r, c in order:
        out = net.forward(np.where(visible, inp, 0.0), masks)
        v = x[:, :, r, c]
        total -= net.head.pixel_log_prob(out[:, :, r, c], v)
        visible[r, c] = True
    return total
