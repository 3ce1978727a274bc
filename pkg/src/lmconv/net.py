"""Single-stream network of locally masked convolutions.

Layout::

    h = conv_0(x)                                  # first-layer (strict) masks
    h = h + conv_l(elu(norm_l(h)))   l = 1..depth-1  # deeper-layer masks
    out = head(elu(norm_out(h)))                   # 1x1, per-pixel parameters

Every convolution uses the same spatial size (dilation instead of
downsampling) and every normalisation works across channels at a single
location, so no operation mixes information between pixels except the masked
convolutions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .conv import ConvParams, lmconv_backward, lmconv_forward_ctx
from .errors import InvalidArgument, NumericFailure
from .likelihood import make_head
from .masks import MaskCache
from .orders import GenerationOrder

DEFAULT_DILATIONS = (1, 1, 2, 1, 4, 1, 2, 1)


@dataclass
class ModelConfig:
    channels: int = 1
    height: int = 28
    width: int = 28
    hidden: int = 64
    depth: int = 8
    kernel: int = 3
    dilations: tuple = DEFAULT_DILATIONS
    head: str = "binary"
    n_mix: int = 10
    bits: int = 8
    mask_conditioning: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.depth < 1:
            raise InvalidArgument("depth must be at least 1")
        if len(self.dilations) != self.depth:
            raise InvalidArgument(f"dilation schedule has {len(self.dilations)} entries for depth {self.depth}")
        if min(self.dilations) < 1:
            raise InvalidArgument("dilations must be positive")
        if self.n_mix < 1:
            raise InvalidArgument("n_mix must be at least 1")
        if self.kernel % 2 == 0:
            raise InvalidArgument("kernel size must be odd")
        if min(self.channels, self.height, self.width, self.hidden) < 1:
            raise InvalidArgument("channels, height, width and hidden must be positive")

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)

    @property
    def dims(self):
        return self.channels * self.height * self.width

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv_names(config: ModelConfig):
    return [f"conv{l}" for l in range(config.depth)]


def init_parameters(config: ModelConfig, seed: int = 0) -> dict:
    """Fan-in scaled uniform weights, zero biases, unit gains, zero shifts."""
    rng = np.random.default_rng(seed)
    head = make_head(config.head, config.channels, config.n_mix, config.bits)
    kk = config.kernel * config.kernel
    params = {}
    for l in range(config.depth):
        cin = config.channels if l == 0 else config.hidden
        if l > 0:
            params[f"norm{l}.gain"] = np.ones(config.hidden)
            params[f"norm{l}.shift"] = np.zeros(config.hidden)
        bound = 1.0 / np.sqrt(cin * kk)
        params[f"conv{l}.weight"] = rng.uniform(-bound, bound, size=(config.hidden, cin * kk))
        params[f"conv{l}.bias"] = np.zeros(config.hidden)
        if config.mask_conditioning:
            params[f"conv{l}.mask_weight"] = rng.uniform(-bound, bound, size=(config.hidden, kk))
    params["norm_out.gain"] = np.ones(config.hidden)
    params["norm_out.shift"] = np.zeros(config.hidden)
    bound = 1.0 / np.sqrt(config.hidden)
    params["head.weight"] = rng.uniform(-bound, bound, size=(head.n_outputs, config.hidden))
    params["head.bias"] = np.zeros(head.n_outputs)
    return params


def channel_norm(x, gain, shift, eps=1e-5):
    """Normalise across channels at every (batch, row, col) location."""
    return channel_norm_ctx(x, gain, shift, eps)[0]


def channel_norm_ctx(x, gain, shift, eps=1e-5):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gain[None, :, None, None] + shift[None, :, None, None]
    return y, (xhat, inv_std)


def channel_norm_backward(dy, ctx, gain):
    xhat, inv_std = ctx
    dgain = (dy * xhat).sum(axis=(0, 2, 3))
    dshift = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gain[None, :, None, None]
    dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dgain, dshift


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(dy, x):
    return dy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _finite(t, layer):
    if not np.isfinite(t).all():
        raise NumericFailure(f"non-finite activations at layer {layer}", layer=layer)


@dataclass
class ForwardCache:
    convs: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    pre_elu: list = field(default_factory=list)
    head_input: Optional[np.ndarray] = None
    norm_out: tuple = None
    pre_elu_out: Optional[np.ndarray] = None


class Network:
    """Parameters plus the layer wiring; masks are supplied per call."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0,
                 store_patches: bool = False):
        self.config = config
        self.head = make_head(config.head, config.channels, config.n_mix, config.bits)
        self.params = params if params is not None else init_parameters(config, seed)
        self.mask_cache = MaskCache()
        self.store_patches = store_patches
        self._check_params()

    def _check_params(self):
        expected = init_parameters(self.config, 0)
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise InvalidArgument(f"parameter names do not match the configuration: {sorted(missing)}")
        for k, v in expected.items():
            if self.params[k].shape != v.shape:
                raise InvalidArgument(f"parameter {k} has shape {self.params[k].shape}, expected {v.shape}")

    def masks_for(self, order: GenerationOrder) -> list:
        cfg = self.config
        if order.shape != (cfg.height, cfg.width):
            raise InvalidArgument(f"order is {order.height}x{order.width}, model is {cfg.height}x{cfg.width}")
        return [
            self.mask_cache.get(order, cfg.channels if l == 0 else cfg.hidden, cfg.kernel, cfg.kernel,
                                cfg.dilations[l], l == 0)
            for l in range(cfg.depth)
        ]

    def conv_params(self, l) -> ConvParams:
        p = self.params
        return ConvParams(p[f"conv{l}.weight"], p[f"conv{l}.bias"], p.get(f"conv{l}.mask_weight"))

    def _conv(self, l, x, mask):
        try:
            return lmconv_forward_ctx(x, mask, self.conv_params(l), self.store_patches)
        except NumericFailure as exc:
            exc.layer = l
            raise

    def forward(self, x: np.ndarray, masks: list, cache: Optional[ForwardCache] = None) -> np.ndarray:
        """Distribution parameters ``(B, P, H, W)`` for model input ``x``.

        Pass a :class:`ForwardCache` to keep what :meth:`backward` needs.
        """
        cfg, p = self.config, self.params
        if len(masks) != cfg.depth:
            raise InvalidArgument(f"expected {cfg.depth} masks, got {len(masks)}")
        if not masks[0].is_first_layer or any(m.is_first_layer for m in masks[1:]):
            raise InvalidArgument("only the first mask may be a first-layer mask")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != cfg.image_shape:
            raise InvalidArgument(f"input shape {x.shape} does not match model {cfg.image_shape}")
        h, ctx = self._conv(0, x, masks[0])
        _finite(h, 0)
        if cache is not None:
            cache.convs.append(ctx)
        for l in range(1, cfg.depth):
            a, nctx = channel_norm_ctx(h, p[f"norm{l}.gain"], p[f"norm{l}.shift"], cfg.norm_eps)
            e = elu(a)
            u, ctx = self._conv(l, e, masks[l])
            h = h + u
            _finite(h, l)
            if cache is not None:
                cache.norms.append(nctx)
                cache.pre_elu.append(a)
                cache.convs.append(ctx)
        a, nctx = channel_norm_ctx(h, p["norm_out.gain"], p["norm_out.shift"], cfg.norm_eps)
        e = elu(a)
        out = np.einsum("oc,bchw->bohw", p["head.weight"], e) + p["head.bias"][None, :, None, None]
        _finite(out, cfg.depth)
        if cache is not None:
            cache.norm_out = nctx
            cache.pre_elu_out = a
            cache.head_input = e
        return out

    def backward(self, dout: np.ndarray, cache: ForwardCache) -> dict:
        """Gradients of ``sum(dout * out)`` for every parameter, plus ``"input"``."""
        cfg, p = self.config, self.params
        grads = {}
        grads["head.weight"] = np.einsum("bohw,bchw->oc", dout, cache.head_input)
        grads["head.bias"] = dout.sum(axis=(0, 2, 3))
        de = np.einsum("oc,bohw->bchw", p["head.weight"], dout)
        da = elu_backward(de, cache.pre_elu_out)
        dh, grads["norm_out.gain"], grads["norm_out.shift"] = channel_norm_backward(
            da, cache.norm_out, p["norm_out.gain"])
        for l in range(cfg.depth - 1, 0, -1):
            g = lmconv_backward(dh, cache.convs[l])
            grads[f"conv{l}.weight"], grads[f"conv{l}.bias"] = g.weight, g.bias
            if g.mask_weight is not None:
                grads[f"conv{l}.mask_weight"] = g.mask_weight
            da = elu_backward(g.x, cache.pre_elu[l - 1])
            dn, grads[f"norm{l}.gain"], grads[f"norm{l}.shift"] = channel_norm_backward(
                da, cache.norms[l - 1], p[f"norm{l}.gain"])
            dh = dh + dn
        g = lmconv_backward(dh, cache.convs[0])
        grads["conv0.weight"], grads["conv0.bias"] = g.weight, g.bias
        if g.mask_weight is not None:
            grads["conv0.mask_weight"] = g.mask_weight
        grads["input"] = g.x
        return grads

    def num_parameters(self):
        return sum(v.size for v in self.params.values())
