"""File formats: IDX arrays, PBM/PGM/PPM images and model checkpoints."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidArgument

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Parse an IDX buffer (big-endian header, optionally gzipped on disk)."""
    if len(data) < 4:
        raise FormatError(f"{name}: file too short for an IDX header ({len(data)} bytes)", offset=0)
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"{name}: bad IDX magic {data[:4].hex()}", offset=0)
    dtype = _IDX_TYPES.get(data[2])
    if dtype is None:
        raise FormatError(f"{name}: unknown IDX element type 0x{data[2]:02x}", offset=2)
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{name}: truncated IDX header, expected {header} bytes, got {len(data)}", offset=4)
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes for dims {dims}, got {len(data)}",
                          offset=min(len(data), expected))
    arr = np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path), str(path))


def save_idx(array: np.ndarray, path) -> None:
    array = np.asarray(array)
    codes = {v.newbyteorder("=").str: k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("=").str)
    if code is None:
        raise InvalidArgument(f"dtype {array.dtype} has no IDX encoding")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


# -- Netpbm ------------------------------------------------------------------

def _pnm_tokens(data: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header", offset=pos)
        tokens.append(data[start:pos])
    return tokens, pos


def read_pnm(path) -> np.ndarray:
    """Read a PBM/PGM/PPM file into an (H, W) or (3, H, W) integer array.

    PBM pixels are returned as 0/1 with 1 meaning black, as in the format.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6"):
        raise FormatError(f"{path}: not a netpbm file", offset=0)
    kind = int(magic[1:2])
    bitmap = kind in (1, 4)
    ntok = 2 if bitmap else 3
    tokens, pos = _pnm_tokens(data, ntok, 2)
    w, h = int(tokens[0]), int(tokens[1])
    maxval = 1 if bitmap else int(tokens[2])
    chans = 3 if kind in (3, 6) else 1
    if kind == 1:
        body = b"".join(data[pos:].split())  # digits need not be separated
        if len(body) < w * h:
            raise FormatError(f"{path}: expected {w * h} PBM digits, got {len(body)}", offset=pos)
        arr = np.frombuffer(body[: w * h], dtype=np.uint8) - ord("0")
    elif kind in (2, 3):
        values, _ = _pnm_tokens(data, w * h * chans, pos)
        arr = np.array([int(v) for v in values], dtype=np.int64)
    else:
        pos += 1  # single whitespace after header
        if kind == 4:
            row_bytes = (w + 7) // 8
            need = row_bytes * h
            if len(data) - pos < need:
                raise FormatError(f"{path}: expected {need} bytes of PBM data, got {len(data) - pos}", offset=pos)
            packed = np.frombuffer(data[pos:pos + need], dtype=np.uint8).reshape(h, row_bytes)
            arr = np.unpackbits(packed, axis=1)[:, :w]
        else:
            itemsize = 2 if maxval > 255 else 1
            need = w * h * chans * itemsize
            if len(data) - pos < need:
                raise FormatError(f"{path}: expected {need} bytes of pixel data, got {len(data) - pos}", offset=pos)
            arr = np.frombuffer(data[pos:pos + need], dtype=">u2" if itemsize == 2 else np.uint8)
    arr = np.asarray(arr, dtype=np.int64)
    if chans == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return arr.reshape(h, w)


def write_pgm(image: np.ndarray, path, maxval: int = 255) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise InvalidArgument("PGM images must be 2-D")
    if image.min() < 0 or image.max() > maxval:
        raise InvalidArgument(f"pixel values outside [0, {maxval}]")
    h, w = image.shape
    dt = ">u2" if maxval > 255 else np.uint8
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + image.astype(dt).tobytes())


def write_ppm(image: np.ndarray, path, maxval: int = 255) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidArgument("PPM images must have shape (3, H, W)")
    if image.min() < 0 or image.max() > maxval:
        raise InvalidArgument(f"pixel values outside [0, {maxval}]")
    _, h, w = image.shape
    dt = ">u2" if maxval > 255 else np.uint8
    body = image.transpose(1, 2, 0).astype(dt).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode() + body)


def write_pbm(bitmap: np.ndarray, path) -> None:
    bitmap = np.asarray(bitmap, dtype=np.uint8)
    h, w = bitmap.shape
    packed = np.packbits(bitmap, axis=1)
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + packed.tobytes())


def save_image(image: np.ndarray, path, levels: int) -> None:
    """Write a (C, H, W) integer image as PGM (C == 1) or PPM (C == 3)."""
    image = np.asarray(image)
    maxval = max(levels - 1, 1)
    if image.shape[0] == 1:
        write_pgm(image[0], path, maxval)
    elif image.shape[0] == 3:
        write_ppm(image, path, maxval)
    else:
        raise InvalidArgument(f"cannot write a {image.shape[0]}-channel image")


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile (N, C, H, W) images into one (C, H', W') image."""
    n, c, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=images.dtype)
    for i in range(n):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i]
    return grid


# -- Checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"LMCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    orders: list  # order descriptors (names or explicit sequences)
    params: dict
    optimizer: Optional[dict] = None  # {"step": int, "m": {...}, "v": {...}}
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented

        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)

        if self.config != other.config or self.orders != other.orders or self.meta != other.meta:
            return False
        if not same(self.params, other.params):
            return False
        if (self.optimizer is None) != (other.optimizer is None):
            return False
        if self.optimizer is not None:
            return (self.optimizer["step"] == other.optimizer["step"]
                    and same(self.optimizer["m"], other.optimizer["m"])
                    and same(self.optimizer["v"], other.optimizer["v"]))
        return True


def _pack_tensors(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_tensors(data: bytes, pos: int, path):
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out, pos


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u32 JSON length, JSON header
    (config, orders, meta, optimizer step), then tensor tables for the
    parameters and, if present, Adam moments."""
    header = {
        "config": ckpt.config,
        "orders": ckpt.orders,
        "meta": ckpt.meta,
        "optimizer_step": None if ckpt.optimizer is None else int(ckpt.optimizer["step"]),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes, _pack_tensors(ckpt.params)]
    if ckpt.optimizer is not None:
        body.append(_pack_tensors(ckpt.optimizer["m"]))
        body.append(_pack_tensors(ckpt.optimizer["v"]))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(body))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated checkpoint header", offset=4)
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}", offset=4)
    try:
        header = json.loads(data[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}", offset=12) from exc
    params, pos = _unpack_tensors(data, 12 + hlen, path)
    optimizer = None
    if header["optimizer_step"] is not None:
        m, pos = _unpack_tensors(data, pos, path)
        v, pos = _unpack_tensors(data, pos, path)
        optimizer = {"step": header["optimizer_step"], "m": m, "v": v}
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)
    return Checkpoint(header["config"], header["orders"], params, optimizer, header["meta"])
