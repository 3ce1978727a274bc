"""Pixel generation orders over an H x W grid.

An order is a permutation of grid cells. Raster scan, serpentine (S-curve)
and generalized Hilbert traversals are provided, together with orders whose
prefix is a prescribed set of observed cells.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument

N_SCURVE_VARIANTS = 8


class Coord(NamedTuple):
    row: int
    col: int


class GenerationOrder:
    """A bijection between positions ``0..H*W-1`` and grid coordinates.

    Both directions are stored: ``sequence[i]`` is the coordinate generated
    at step ``i`` and ``position[r, c]`` is the step at which ``(r, c)`` is
    generated. Instances are immutable.
    """

    __slots__ = ("height", "width", "sequence", "position", "name")

    def __init__(self, height: int, width: int, sequence, name: str = "custom"):
        _check_dims(height, width)
        seq = np.asarray(sequence, dtype=np.int64).reshape(-1, 2)
        n = height * width
        if seq.shape[0] != n:
            raise InvalidArgument(f"order has {seq.shape[0]} cells, grid has {n}")
        r, c = seq[:, 0], seq[:, 1]
        if r.min() < 0 or r.max() >= height or c.min() < 0 or c.max() >= width:
            raise InvalidArgument("order references a cell outside the grid")
        position = np.full((height, width), -1, dtype=np.int64)
        position[r, c] = np.arange(n)
        if (position < 0).any():
            raise InvalidArgument("order is not a permutation of the grid cells")
        seq.setflags(write=False)
        position.setflags(write=False)
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "sequence", seq)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "name", name)

    def __setattr__(self, key, value):
        raise AttributeError("GenerationOrder is immutable")

    def __len__(self):
        return self.height * self.width

    def __getitem__(self, i) -> Coord:
        r, c = self.sequence[i]
        return Coord(int(r), int(c))

    def __iter__(self):
        for r, c in self.sequence:
            yield Coord(int(r), int(c))

    def __eq__(self, other):
        if not isinstance(other, GenerationOrder):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.sequence, other.sequence)
        )

    def __hash__(self):
        return hash((self.height, self.width, self.sequence.tobytes()))

    def __repr__(self):
        return f"GenerationOrder({self.name!r}, {self.height}x{self.width})"

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def key(self) -> str:
        """Stable identifier used for mask caching."""
        import hashlib

        digest = hashlib.sha1(self.sequence.tobytes()).hexdigest()[:16]
        return f"{self.height}x{self.width}:{digest}"

    def index_of(self, coord) -> int:
        r, c = coord
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise InvalidArgument(f"coordinate {tuple(coord)} outside {self.height}x{self.width} grid")
        return int(self.position[r, c])

    def flat_sequence(self) -> np.ndarray:
        """Row-major flat indices ``W*r + c`` in generation order."""
        return self.sequence[:, 0] * self.width + self.sequence[:, 1]

    def reverse(self) -> "GenerationOrder":
        return GenerationOrder(self.height, self.width, self.sequence[::-1], name=f"reverse({self.name})")


def index_of(order: GenerationOrder, coord) -> int:
    return order.index_of(coord)


def reverse(order: GenerationOrder) -> GenerationOrder:
    return order.reverse()


def _check_dims(height, width):
    if int(height) != height or int(width) != width or height < 1 or width < 1:
        raise InvalidArgument(f"grid dimensions must be positive integers, got {height}x{width}")


def raster_order(height: int, width: int) -> GenerationOrder:
    _check_dims(height, width)
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return GenerationOrder(height, width, np.stack([rr.ravel(), cc.ravel()], 1), name="raster")


def _serpentine_rows(height, width):
    seq = []
    for r in range(height):
        cols = range(width) if r % 2 == 0 else range(width - 1, -1, -1)
        seq.extend((r, c) for c in cols)
    return np.asarray(seq, dtype=np.int64)


def _dihedral(generator, height, width, variant):
    """Apply one of 8 grid symmetries to a traversal produced by ``generator``.

    ``variant // 4`` selects transposition (the base traversal is generated on
    the transposed grid), ``variant & 2`` flips rows and ``variant & 1`` flips
    columns, so the four corners times two major axes give 8 traversals.
    """
    if variant // 4:
        seq = generator(width, height)[:, ::-1].copy()
    else:
        seq = generator(height, width)
    if variant & 2:
        seq[:, 0] = height - 1 - seq[:, 0]
    if variant & 1:
        seq[:, 1] = width - 1 - seq[:, 1]
    return seq


def s_curve_order(height: int, width: int, variant: int = 0) -> GenerationOrder:
    """Serpentine traversal.

    Variants 0-3 snake along rows starting from the top-left, top-right,
    bottom-left and bottom-right corner; variants 4-7 snake along columns
    from the same corners.
    """
    _check_dims(height, width)
    if not (0 <= variant < N_SCURVE_VARIANTS) or int(variant) != variant:
        raise InvalidArgument(f"S-curve variant must be in [0, 8), got {variant}")
    seq = _dihedral(_serpentine_rows, height, width, int(variant))
    return GenerationOrder(height, width, seq, name=f"s{variant}")


def _sgn(v):
    return int(v > 0) - int(v < 0)


def _gilbert(x, y, ax, ay, bx, by, out):
    # Generalized Hilbert curve on the rectangle spanned by vectors a (major) and b.
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)
    if h == 1:
        for _ in range(w):
            out.append((x, y))
            x, y = x + dax, y + day
        return
    if w == 1:
        for _ in range(h):
            out.append((x, y))
            x, y = x + dbx, y + dby
        return
    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)
    if 2 * w > 3 * h:
        if w2 % 2 and w > 2:
            ax2, ay2 = ax2 + dax, ay2 + day
        _gilbert(x, y, ax2, ay2, bx, by, out)
        _gilbert(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out)
    else:
        if h2 % 2 and h > 2:
            bx2, by2 = bx2 + dbx, by2 + dby
        _gilbert(x, y, bx2, by2, ax2, ay2, out)
        _gilbert(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out)
        _gilbert(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2, -by2, -(ax - ax2), -(ay - ay2),
            out,
        )


def _gilbert_rows(height, width):
    out = []
    # A corner-to-corner Hamiltonian path along an odd major axis with an even
    # minor axis cannot exist (endpoint colours clash), so run along the even side.
    major_is_width = width >= height
    if width % 2 and not height % 2:
        major_is_width = False
    elif height % 2 and not width % 2:
        major_is_width = True
    if major_is_width:
        _gilbert(0, 0, width, 0, 0, height, out)
    else:
        _gilbert(0, 0, 0, height, width, 0, out)
    # (x, y) -> (row, col)
    return np.asarray([(y, x) for x, y in out], dtype=np.int64)


def hilbert_order(height: int, width: int, variant: int = 0) -> GenerationOrder:
    """Generalized Hilbert (gilbert) traversal for arbitrary rectangles.

    ``variant`` applies the same 8 grid symmetries as :func:`s_curve_order`.
    Variant 0 starts at the top-left corner.
    """
    _check_dims(height, width)
    if not (0 <= variant < N_SCURVE_VARIANTS):
        raise InvalidArgument(f"Hilbert variant must be in [0, 8), got {variant}")
    seq = _dihedral(_gilbert_rows, height, width, int(variant))
    return GenerationOrder(height, width, seq, name=f"h{variant}" if variant else "hilbert")


class ObservedSet:
    """Bitmap of observed grid cells."""

    __slots__ = ("height", "width", "bitmap")

    def __init__(self, bitmap):
        bm = np.asarray(bitmap, dtype=bool)
        if bm.ndim != 2:
            raise InvalidArgument("observed bitmap must be 2-D")
        bm = bm.copy()
        bm.setflags(write=False)
        self.height, self.width = bm.shape
        self.bitmap = bm

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height, width):
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def hiding(cls, region: str, height: int, width: int) -> "ObservedSet":
        """Observed set whose complement is the named half of the image."""
        hidden = np.zeros((height, width), dtype=bool)
        if region == "top":
            hidden[: height // 2] = True
        elif region == "bottom":
            hidden[height - height // 2:] = True
        elif region == "left":
            hidden[:, : width // 2] = True
        elif region == "right":
            hidden[:, width - width // 2:] = True
        else:
            raise InvalidArgument(f"unknown region {region!r}")
        return cls(~hidden)

    @property
    def hidden(self) -> np.ndarray:
        return ~self.bitmap

    def __len__(self):
        return int(self.bitmap.sum())

    def __contains__(self, coord):
        r, c = coord
        return bool(self.bitmap[r, c])

    def __eq__(self, other):
        return isinstance(other, ObservedSet) and np.array_equal(self.bitmap, other.bitmap)


def max_context_order(observed: ObservedSet, fill_variant: int = 0) -> GenerationOrder:
    """Order whose first ``len(observed)`` cells are exactly the observed cells.

    Both the observed prefix and the hidden suffix follow S-curve
    ``fill_variant`` restricted to their cells.
    """
    base = s_curve_order(observed.height, observed.width, fill_variant)
    seq = base.sequence
    is_obs = observed.bitmap[seq[:, 0], seq[:, 1]]
    ordered = np.concatenate([seq[is_obs], seq[~is_obs]])
    return GenerationOrder(observed.height, observed.width, ordered, name=f"maxctx{fill_variant}")


# Variants whose restricted traversal visits the hidden half last and stays
# contiguous across the boundary, keyed by the hidden region.
MAX_CONTEXT_VARIANTS = {
    "top": (2, 3),
    "bottom": (0, 1),
    "left": (5, 7),
    "right": (4, 6),
}

# Top-first traversals that generate the hidden region before the context.
ADVERSARIAL_VARIANTS = {"top": 0, "bottom": 2, "left": 4, "right": 5}


def is_hamiltonian_path(order: GenerationOrder) -> bool:
    """True iff consecutive cells are 4-neighbours."""
    steps = np.abs(np.diff(order.sequence, axis=0)).sum(1)
    return bool((steps == 1).all())


_NAME_RE = re.compile(r"^(raster|hilbert|s([0-7])|h([0-7]))$")


def order_from_name(name: str, height: int, width: int) -> GenerationOrder:
    """Resolve ``raster``, ``s0``..``s7``, ``hilbert``/``h0``..``h7`` or ``file:<path>``."""
    if name.startswith("file:"):
        order = load_order(name[5:])
        if order.shape != (height, width):
            raise InvalidArgument(f"order file {name[5:]} is {order.height}x{order.width}, expected {height}x{width}")
        return order
    m = _NAME_RE.match(name)
    if not m:
        raise InvalidArgument(f"unknown order {name!r}")
    if name == "raster":
        return raster_order(height, width)
    if name == "hilbert":
        return hilbert_order(height, width, 0)
    if m.group(2) is not None:
        return s_curve_order(height, width, int(m.group(2)))
    return hilbert_order(height, width, int(m.group(3)))


def expand_order_names(spec: str | Iterable[str]) -> list[str]:
    """Expand comma lists and ranges such as ``s0..s7``."""
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.split(",") if p.strip()]
    else:
        parts = list(spec)
    names = []
    for part in parts:
        m = re.match(r"^([sh])(\d)\.\.\1(\d)$", part)
        if m:
            lo, hi = int(m.group(2)), int(m.group(3))
            names.extend(f"{m.group(1)}{i}" for i in range(lo, hi + 1))
        else:
            names.append(part)
    return names


def save_order(order: GenerationOrder, path) -> None:
    lines = [f"{order.height} {order.width}"]
    lines.extend(f"{r} {c}" for r, c in order.sequence)
    Path(path).write_text("\n".join(lines) + "\n")


def load_order(path) -> GenerationOrder:
    text = Path(path).read_text().split("\n")
    rows = [ln.split() for ln in text if ln.strip()]
    try:
        h, w = (int(v) for v in rows[0])
        seq = [(int(a), int(b)) for a, b in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed order file {path}: {exc}") from exc
    return GenerationOrder(h, w, seq, name=f"file:{path}")


def orders_from_names(names: Sequence[str], height: int, width: int) -> list[GenerationOrder]:
    return [order_from_name(n, height, width) for n in expand_order_names(names)]
