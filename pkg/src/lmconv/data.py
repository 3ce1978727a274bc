"""Datasets: IDX files, directories of netpbm images and synthetic toys.

All loaders return integer arrays of shape (N, C, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .formats import load_idx, read_pnm


def stripes(n, height, width, rng, noise=0.0):
    """Binary images made of constant rows with vertical period 2.

    Rows ``r`` and ``r + 2`` are always equal, so either half of the image
    determines the other: 4 equiprobable images before noise.
    """
    phase = rng.integers(0, 2, size=(n, 2))
    rows = phase[:, np.arange(height) % 2]
    x = np.repeat(rows[:, :, None], width, axis=2)
    return _flip(x, rng, noise)[:, None]


def bars(n, height, width, rng, p=0.5, noise=0.0):
    """Binary images of full-length horizontal or vertical bars."""
    horizontal = rng.uniform(size=n) < 0.5
    x = np.zeros((n, height, width), dtype=np.int64)
    on_rows = rng.uniform(size=(n, height)) < p
    on_cols = rng.uniform(size=(n, width)) < p
    x[horizontal] = np.repeat(on_rows[horizontal][:, :, None], width, axis=2)
    x[~horizontal] = np.repeat(on_cols[~horizontal][:, None, :], height, axis=1)
    return _flip(x, rng, noise)[:, None]


def ramps(n, height, width, rng, bits=8, channels=1, noise=0.05):
    """Smooth intensity ramps with random direction, offset and Gaussian noise."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    theta = rng.uniform(0, 2 * np.pi, size=(n, channels, 1, 1))
    offset = rng.uniform(-0.3, 0.3, size=(n, channels, 1, 1))
    v = 0.5 + 0.35 * (np.cos(theta) * xx + np.sin(theta) * yy) + offset
    v = v + noise * rng.standard_normal(v.shape)
    top = 2 ** bits - 1
    return np.clip(np.rint(v * top), 0, top).astype(np.int64)


def _flip(x, rng, noise):
    x = np.asarray(x, dtype=np.int64)
    if noise > 0:
        x = np.where(rng.uniform(size=x.shape) < noise, 1 - x, x)
    return x


SYNTHETIC = {"stripes": stripes, "bars": bars, "ramps": ramps}


def binarize(images, rng):
    """Stochastic binarization: each pixel is 1 with probability intensity / max."""
    images = np.asarray(images, dtype=np.float64)
    scale = 255.0 if images.max() > 1 else 1.0
    return (rng.uniform(size=images.shape) < images / scale).astype(np.int64)


def requantize(images, from_bits, to_bits):
    if to_bits == from_bits:
        return np.asarray(images, dtype=np.int64)
    return (np.asarray(images, dtype=np.int64) >> (from_bits - to_bits)).astype(np.int64)


def split(data, train_fraction, seed):
    idx = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_fraction * len(data)))
    return data[idx[:cut]], data[idx[cut:]]


@dataclass
class DatasetSpec:
    """Where images come from and how they are preprocessed.

    ``source`` is one of ``synthetic:<name>``, ``idx:<images file>`` or
    ``dir:<directory of .pgm/.ppm files>``.
    """

    source: str
    bits: int = 8
    binarize: bool = False
    train_fraction: float = 0.9
    seed: int = 0
    count: int = 1000  # synthetic only
    height: int = 28  # synthetic only
    width: int = 28  # synthetic only
    channels: int = 1  # synthetic only
    noise: float = 0.0  # synthetic only
    limit: int = 0  # keep at most this many images (0 = all)

    def load(self):
        """``(train, test)`` integer arrays."""
        rng = np.random.default_rng(self.seed)
        kind, _, arg = self.source.partition(":")
        if kind == "synthetic":
            gen = SYNTHETIC.get(arg)
            if gen is None:
                raise InvalidArgument(f"unknown synthetic dataset {arg!r}")
            if arg == "ramps":
                data = gen(self.count, self.height, self.width, rng, bits=self.bits, channels=self.channels,
                           noise=self.noise or 0.05)
            else:
                data = gen(self.count, self.height, self.width, rng, noise=self.noise)
        elif kind == "idx":
            if not Path(arg).exists():
                raise InvalidArgument(f"dataset path {arg!r} does not exist")
            raw = load_idx(arg)
            if raw.ndim != 3:
                raise InvalidArgument(f"expected a 3-D image tensor in {arg}, got {raw.ndim}-D")
            data = self._preprocess(raw[:, None].astype(np.int64), rng)
        elif kind == "dir":
            files = sorted(p for p in Path(arg).glob("*") if p.suffix.lower() in (".pgm", ".ppm", ".pbm"))
            if not files:
                raise InvalidArgument(f"dataset directory {arg!r} has no netpbm images")
            imgs = [read_pnm(p) for p in files]
            data = np.stack([im[None] if im.ndim == 2 else im for im in imgs])
            data = self._preprocess(data, rng)
        else:
            raise InvalidArgument(f"unknown dataset source {self.source!r}")
        if self.limit:
            data = data[: self.limit]
        return split(data, self.train_fraction, self.seed)

    def _preprocess(self, data, rng):
        if self.binarize:
            return binarize(data, rng)
        if self.bits < 8:
            return requantize(data, 8, self.bits)
        return data
