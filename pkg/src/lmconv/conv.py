"""Locally masked 2-D convolution on top of im2col / GEMM / col2im.

Stride is 1 and padding is "same": ``pad = dilation * (k // 2)`` per axis, so
every feature map keeps its spatial size. All arrays are float64 in NCHW.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericFailure
from .masks import MaskMatrix


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in*k1*k2)
    bias: np.ndarray  # (C_out,)
    mask_weight: Optional[np.ndarray] = None  # (C_out, k1*k2)

    @property
    def out_channels(self):
        return self.weight.shape[0]


class ConvGrads(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    mask_weight: Optional[np.ndarray]


@dataclass
class ConvContext:
    """What the forward pass keeps alive for the backward pass.

    With ``patches`` left as ``None`` the masked patch matrix is rebuilt from
    ``x`` during backward instead of being held between the two passes.
    """

    x: np.ndarray
    mask: MaskMatrix
    params: ConvParams
    patches: Optional[np.ndarray] = None

    def saved_arrays(self):
        arrays = [self.x, self.mask.bits, self.params.weight, self.params.bias]
        if self.params.mask_weight is not None:
            arrays.append(self.params.mask_weight)
        if self.patches is not None:
            arrays.append(self.patches)
        return arrays

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.saved_arrays())


def _padding(k1, k2, dilation):
    return dilation * (k1 // 2), dilation * (k2 // 2)


def im2col(x: np.ndarray, k1: int, k2: int, dilation: int = 1) -> np.ndarray:
    """Patch matrix of shape ``(B, C*k1*k2, H*W)`` with zero padding.

    Row ``c*k1*k2 + k2*dr + dc`` of column ``W*r + c`` holds
    ``x[:, c, r + d*(dr - k1//2), col + d*(dc - k2//2)]``.
    """
    if x.ndim != 4:
        raise InvalidArgument(f"expected a B x C x H x W array, got shape {x.shape}")
    b, c, h, w = x.shape
    pr, pc = _padding(k1, k2, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pr, pr), (pc, pc)))
    cols = np.empty((b, c, k1 * k2, h, w), dtype=np.result_type(x, np.float64))
    for i in range(k1):
        for j in range(k2):
            cols[:, :, i * k2 + j] = xp[:, :, i * dilation: i * dilation + h, j * dilation: j * dilation + w]
    return cols.reshape(b, c * k1 * k2, h * w)


def col2im(cols: np.ndarray, shape, k1: int, k2: int, dilation: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch entries back onto the image."""
    b, c, h, w = shape
    if cols.shape != (b, c * k1 * k2, h * w):
        raise InvalidArgument(f"patch matrix shape {cols.shape} does not match image {shape}")
    pr, pc = _padding(k1, k2, dilation)
    out = np.zeros((b, c, h + 2 * pr, w + 2 * pc), dtype=cols.dtype)
    blocks = cols.reshape(b, c, k1 * k2, h, w)
    for i in range(k1):
        for j in range(k2):
            out[:, :, i * dilation: i * dilation + h, j * dilation: j * dilation + w] += blocks[:, :, i * k2 + j]
    return out[:, :, pr: pr + h, pc: pc + w]


def _check(x, mask: MaskMatrix, params: ConvParams):
    if x.ndim != 4:
        raise InvalidArgument(f"expected a B x C x H x W array, got shape {x.shape}")
    _, c, h, w = x.shape
    rows = c * mask.k1 * mask.k2
    if mask.bits.shape != (rows, h * w):
        raise InvalidArgument(f"mask shape {mask.bits.shape} does not match input {x.shape} "
                              f"with a {mask.k1}x{mask.k2} kernel")
    if params.weight.ndim != 2 or params.weight.shape[1] != rows:
        raise InvalidArgument(f"weight shape {params.weight.shape} incompatible with {rows} patch rows")
    if params.bias.shape != (params.weight.shape[0],):
        raise InvalidArgument(f"bias shape {params.bias.shape} does not match {params.weight.shape[0]} outputs")
    if params.mask_weight is not None and params.mask_weight.shape != (params.weight.shape[0], mask.kernel_area):
        raise InvalidArgument(f"mask weight shape {params.mask_weight.shape} must be "
                              f"({params.weight.shape[0]}, {mask.kernel_area})")


def masked_patches(x: np.ndarray, mask: MaskMatrix) -> np.ndarray:
    cols = im2col(x, mask.k1, mask.k2, mask.dilation)
    np.multiply(cols, mask.bits, out=cols)
    return cols


def lmconv_forward_ctx(x: np.ndarray, mask: MaskMatrix, params: ConvParams, store_patches: bool = False):
    """Forward pass returning ``(y, context)`` for a later backward pass."""
    _check(x, mask, params)
    b, _, h, w = x.shape
    cols = masked_patches(x, mask)
    with np.errstate(invalid="ignore", over="ignore"):  # reported below
        y = np.matmul(params.weight, cols)
        if params.mask_weight is not None:
            y += params.mask_weight @ mask.block
        y += params.bias[None, :, None]
    if not np.isfinite(y).all():
        raise NumericFailure("non-finite output in locally masked convolution")
    ctx = ConvContext(x, mask, params, cols if store_patches else None)
    return y.reshape(b, -1, h, w), ctx


def lmconv_forward(x: np.ndarray, mask: MaskMatrix, params: ConvParams) -> np.ndarray:
    """``y = col2im(W (M * im2col(x)) + b)``, plus ``W_M M_block`` if conditioned."""
    return lmconv_forward_ctx(x, mask, params)[0]


def mask_conditioned_forward(x: np.ndarray, mask: MaskMatrix, params: ConvParams) -> np.ndarray:
    if params.mask_weight is None:
        raise InvalidArgument("mask conditioning requires a mask weight matrix")
    return lmconv_forward(x, mask, params)


def lmconv_backward(grad_y: np.ndarray, ctx: Optional[ConvContext]) -> ConvGrads:
    """Gradients w.r.t. input, weight, bias and (if present) mask weight.

    The masked patch matrix is taken from the context when it was stored and
    recomputed from the saved input otherwise; both paths run the same
    arithmetic and agree bit for bit.
    """
    if ctx is None or ctx.x is None or ctx.mask is None or ctx.params is None:
        raise ContractViolation("backward called without a saved forward context")
    x, mask, params = ctx.x, ctx.mask, ctx.params
    b, c, h, w = x.shape
    cout = params.weight.shape[0]
    if grad_y.shape != (b, cout, h, w):
        raise InvalidArgument(f"gradient shape {grad_y.shape} does not match output {(b, cout, h, w)}")
    cols = ctx.patches if ctx.patches is not None else masked_patches(x, mask)
    g = grad_y.reshape(b, cout, h * w)
    g2 = g.transpose(1, 0, 2).reshape(cout, b * h * w)
    x2 = cols.transpose(1, 0, 2).reshape(cols.shape[1], b * h * w)
    grad_w = g2 @ x2.T
    del x2
    grad_b = g2.sum(axis=1)
    grad_wm = None
    if params.mask_weight is not None:
        grad_wm = g.sum(axis=0) @ mask.block.T.astype(np.float64)
    grad_cols = np.matmul(params.weight.T, g)
    np.multiply(grad_cols, mask.bits, out=grad_cols)
    grad_x = col2im(grad_cols, x.shape, mask.k1, mask.k2, mask.dilation)
    return ConvGrads(grad_x, grad_w, grad_b, grad_wm)
