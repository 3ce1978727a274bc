"""Compilation of generation orders into per-location patch masks.

A mask matrix has one row per im2col patch entry (``C_in * k1 * k2``) and one
column per output location (row-major ``W*r + c``). Patch row
``c_in * k1*k2 + k2*dr + dc`` for ``dr in [0, k1)``, ``dc in [0, k2)`` refers to
input coordinate ``(r + d*(dr - k1//2), c + d*(dc - k2//2))``.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, Unsupported
from .orders import GenerationOrder

MASK_MAGIC = b"LMCM"
MASK_VERSION = 1


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    bits: np.ndarray  # uint8, (C_in*k1*k2, H*W)
    k1: int
    k2: int
    dilation: int
    is_first_layer: bool
    order_id: str
    in_channels: int
    height: int
    width: int

    @property
    def kernel_area(self) -> int:
        return self.k1 * self.k2

    @property
    def block(self) -> np.ndarray:
        """First channel block, shape ``(k1*k2, H*W)``."""
        return self.bits[: self.kernel_area]

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, MaskMatrix):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.bits, other.bits)

    @property
    def meta(self):
        return (self.k1, self.k2, self.dilation, self.is_first_layer, self.order_id,
                self.in_channels, self.height, self.width)

    def with_bits(self, bits) -> "MaskMatrix":
        """Copy with replaced bits (used for fault injection in checks)."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != self.bits.shape:
            raise InvalidArgument("replacement bits have the wrong shape")
        bits = bits.copy()
        bits.setflags(write=False)
        return MaskMatrix(bits, self.k1, self.k2, self.dilation, self.is_first_layer,
                          self.order_id + "+modified", self.in_channels, self.height, self.width)


def kernel_offsets(k1, k2, dilation):
    """Spatial displacement of each patch row within one channel block."""
    dr, dc = np.meshgrid(np.arange(k1) - k1 // 2, np.arange(k2) - k2 // 2, indexing="ij")
    return dilation * dr.ravel(), dilation * dc.ravel()


def _check_kernel(k1, k2, dilation):
    if k1 % 2 == 0 or k2 % 2 == 0:
        raise Unsupported(f"kernel {k1}x{k2}: only odd kernel sizes are supported")
    if k1 < 1 or k2 < 1 or dilation < 1:
        raise InvalidArgument("kernel size and dilation must be positive")


def base_mask(order: GenerationOrder, k1: int, k2: int, dilation: int, is_first_layer: bool) -> np.ndarray:
    """Single-channel mask block, shape ``(k1*k2, H*W)``.

    Bit ``(p, W*r + c)`` is set iff the input cell referenced by patch row
    ``p`` at output ``(r, c)`` lies in the image and is generated strictly
    before ``(r, c)``. Deeper layers additionally see their own location.
    """
    _check_kernel(k1, k2, dilation)
    h, w = order.shape
    pos = order.position
    offr, offc = kernel_offsets(k1, k2, dilation)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_r = rr.ravel()[None, :] + offr[:, None]
    src_c = cc.ravel()[None, :] + offc[:, None]
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    src_pos = np.where(inside, pos[np.clip(src_r, 0, h - 1), np.clip(src_c, 0, w - 1)], np.iinfo(np.int64).max)
    bits = (src_pos < pos.ravel()[None, :]).astype(np.uint8)
    if not is_first_layer:
        bits[(k1 * k2) // 2, :] = 1
    return bits


def build_mask_matrix(order: GenerationOrder, in_channels: int, k1: int = 3, k2: int = 3,
                      dilation: int = 1, is_first_layer: bool = True) -> MaskMatrix:
    if in_channels < 1:
        raise InvalidArgument("in_channels must be positive")
    block = base_mask(order, k1, k2, dilation, is_first_layer)
    bits = np.tile(block, (in_channels, 1))
    bits.setflags(write=False)
    return MaskMatrix(bits, k1, k2, dilation, bool(is_first_layer), order.key, in_channels,
                      order.height, order.width)


def ones_mask(in_channels, k1, k2, height, width, dilation=1) -> MaskMatrix:
    """All-ones mask: the layer degenerates to an ordinary convolution."""
    bits = np.ones((in_channels * k1 * k2, height * width), dtype=np.uint8)
    bits.setflags(write=False)
    return MaskMatrix(bits, k1, k2, dilation, False, "ones", in_channels, height, width)


@dataclass
class MaskCache:
    """Write-once store of compiled masks keyed by order and layer geometry."""

    _store: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def get(self, order: GenerationOrder, in_channels: int, k1: int, k2: int, dilation: int,
            is_first_layer: bool) -> MaskMatrix:
        key = (order.key, "first" if is_first_layer else "deep", k1, k2, dilation, in_channels)
        mask = self._store.get(key)
        if mask is None:
            built = build_mask_matrix(order, in_channels, k1, k2, dilation, is_first_layer)
            with self._lock:
                mask = self._store.setdefault(key, built)
        return mask

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store


def layer_adjacency(order: GenerationOrder, k1: int, k2: int, dilation: int, is_first_layer: bool) -> np.ndarray:
    """Boolean ``(D, D)`` matrix in order-index space: ``A[i, j]`` iff output
    ``order[i]`` reads input ``order[j]`` through the layer's mask."""
    h, w = order.shape
    n = h * w
    block = base_mask(order, k1, k2, dilation, is_first_layer).astype(bool)
    offr, offc = kernel_offsets(k1, k2, dilation)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_idx = order.position.ravel()
    adj = np.zeros((n, n), dtype=bool)
    for p in range(k1 * k2):
        sr = rr.ravel() + offr[p]
        sc = cc.ravel() + offc[p]
        ok = block[p] & (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
        adj[out_idx[ok], order.position[sr[ok], sc[ok]]] = True
    return adj


def receptive_field_closure(order: GenerationOrder, k1: int, k2: int, dilation_schedule, depth: int) -> np.ndarray:
    """Which inputs can influence which outputs after ``depth`` masked layers.

    Entry ``(i, j)`` is True iff the features at ``order[i]`` after the last
    layer depend on the input at ``order[j]``. The first layer uses strict
    masks, later layers also see their own location.
    """
    schedule = list(dilation_schedule)
    if len(schedule) != depth:
        raise InvalidArgument(f"dilation schedule has {len(schedule)} entries, depth is {depth}")
    if depth < 1:
        raise InvalidArgument("depth must be at least 1")
    reach = layer_adjacency(order, k1, k2, schedule[0], True)
    cache = {}
    for d in schedule[1:]:
        if d not in cache:
            cache[d] = layer_adjacency(order, k1, k2, d, False).astype(np.int64)
        reach = (cache[d] @ reach.astype(np.int64)) > 0
    return reach


def shared_weight_mask(k1: int, k2: int, is_first_layer: bool) -> np.ndarray:
    """Classic raster-scan weight mask (PixelCNN mask A / B), shape ``(k1, k2)``."""
    m = np.zeros((k1, k2), dtype=np.uint8)
    m[: k1 // 2, :] = 1
    m[k1 // 2, : k2 // 2] = 1
    if not is_first_layer:
        m[k1 // 2, k2 // 2] = 1
    return m


def dump_mask(mask: MaskMatrix, path) -> None:
    header = MASK_MAGIC + struct.pack(
        "<IIIIIIIB", MASK_VERSION, mask.k1, mask.k2, mask.dilation, mask.in_channels,
        mask.height, mask.width, int(mask.is_first_layer))
    Path(path).write_bytes(header + np.ascontiguousarray(mask.bits, dtype=np.uint8).tobytes())


def load_mask(path) -> MaskMatrix:
    data = Path(path).read_bytes()
    hsize = 4 + struct.calcsize("<IIIIIIIB")
    if len(data) < hsize or data[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: not a mask dump (bad magic)", offset=0)
    version, k1, k2, d, cin, h, w, first = struct.unpack("<IIIIIIIB", data[4:hsize])
    if version != MASK_VERSION:
        raise FormatError(f"{path}: unsupported mask version {version}", offset=4)
    expected = cin * k1 * k2 * h * w
    body = data[hsize:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} mask bytes, found {len(body)}", offset=hsize)
    bits = np.frombuffer(body, dtype=np.uint8).reshape(cin * k1 * k2, h * w).copy()
    bits.setflags(write=False)
    return MaskMatrix(bits, k1, k2, d, bool(first), f"file:{path}", cin, h, w)
