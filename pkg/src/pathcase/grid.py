"""Patch-feature grids: construction, validation and the binary ``MZGR`` format."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MZGR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIfff")  # 32 bytes


class GridError(ValueError):
    """Base class for grid construction and format errors."""


class CollisionError(GridError):
    pass


class BadMagicError(GridError):
    pass


class BadVersionError(GridError):
    pass


class TruncatedError(GridError):
    def __init__(self, what, expected, actual):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class InvariantError(GridError):
    pass


class GridWriteError(OSError):
    pass


@dataclass(frozen=True)
class PatchRecord:
    x: int
    y: int
    feature: np.ndarray

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise GridError(f"negative patch coordinate ({self.x}, {self.y})")


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Dense ``H x W x d_patch`` feature lattice with a tissue validity mask.

    ``features`` is float32 and exactly zero at invalid cells.  ``spacing``
    and ``origin`` are kept float32-representable so that serialization
    round-trips bitwise.
    """

    features: np.ndarray
    validity: np.ndarray
    spacing: float
    origin: tuple = (0.0, 0.0)
    magnification: str = ""

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        valid = np.ascontiguousarray(self.validity, dtype=bool)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "validity", valid)
        object.__setattr__(self, "spacing", float(np.float32(self.spacing)))
        object.__setattr__(
            self, "origin", (float(np.float32(self.origin[0])), float(np.float32(self.origin[1])))
        )
        feats.setflags(write=False)
        valid.setflags(write=False)
        self.check()

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def d_patch(self) -> int:
        return self.features.shape[2]

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())

    def check(self):
        if self.features.ndim != 3:
            raise InvariantError(f"features must be H x W x d, got shape {self.features.shape}")
        H, W, d = self.features.shape
        if H < 1 or W < 1 or d < 1:
            raise InvariantError(f"empty grid shape {self.features.shape}")
        if self.validity.shape != (H, W):
            raise InvariantError(
                f"validity shape {self.validity.shape} does not match grid {(H, W)}"
            )
        if not self.spacing > 0:
            raise InvariantError(f"spacing must be positive, got {self.spacing}")
        if self.n_valid < 1:
            raise InvariantError("grid has no valid cells")
        if np.any(self.features[~self.validity] != 0):
            raise InvariantError("nonzero feature stored at an invalid cell")

    def cell_coords(self) -> np.ndarray:
        """Level-0 ``(x, y)`` coordinate of every cell, shape ``H x W x 2``."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack(
            [self.origin[0] + cols * self.spacing, self.origin[1] + rows * self.spacing], axis=-1
        )

    def valid_tokens(self):
        """Valid features, coordinates and flat indices in raster order."""
        flat = np.flatnonzero(self.validity.ravel())
        feats = self.features.reshape(-1, self.d_patch)[flat]
        coords = self.cell_coords().reshape(-1, 2)[flat]
        return feats, coords, flat

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.validity, other.validity)
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.magnification == other.magnification
        )


def build_grid(patches, spacing: float, magnification: str = "") -> FeatureGrid:
    """Place patches on a lattice by rounding their offsets to multiples of ``spacing``."""
    if not patches:
        raise GridError("no patches given")
    if not spacing > 0:
        raise GridError(f"spacing must be positive, got {spacing}")
    d = len(patches[0].feature)
    for p in patches:
        if len(p.feature) != d:
            raise GridError(
                f"inconsistent feature length at ({p.x}, {p.y}): {len(p.feature)} != {d}"
            )
    x_min = min(p.x for p in patches)
    y_min = min(p.y for p in patches)
    cells = {}
    for p in patches:
        r = math.floor((p.y - y_min) / spacing + 0.5)
        c = math.floor((p.x - x_min) / spacing + 0.5)
        if (r, c) in cells:
            q = cells[(r, c)]
            raise CollisionError(
                f"patches at ({q.x}, {q.y}) and ({p.x}, {p.y}) both map to cell ({r}, {c})"
            )
        cells[(r, c)] = p
    H = max(r for r, _ in cells) + 1
    W = max(c for _, c in cells) + 1
    feats = np.zeros((H, W, d), dtype=np.float32)
    valid = np.zeros((H, W), dtype=bool)
    for (r, c), p in cells.items():
        feats[r, c] = p.feature
        valid[r, c] = True
    return FeatureGrid(feats, valid, spacing, (x_min, y_min), magnification)


def write_grid(grid: FeatureGrid, sink) -> int:
    """Serialize ``grid`` to a binary stream; returns the number of bytes written."""
    tag = grid.magnification.encode("utf-8")
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, grid.height, grid.width, grid.d_patch,
            grid.spacing, grid.origin[0], grid.origin[1],
        ),
        struct.pack("<H", len(tag)),
        tag,
        np.packbits(grid.validity.ravel(), bitorder="little").tobytes(),
        grid.features.astype("<f4").tobytes(),
    ]
    written = 0
    for chunk in parts:
        try:
            sink.write(chunk)
        except OSError as e:
            raise GridWriteError(f"grid write failed at byte offset {written}: {e}") from e
        written += len(chunk)
    return written


def _read_exact(source, n, what):
    data = source.read(n)
    if len(data) != n:
        raise TruncatedError(what, n, len(data))
    return data


def read_grid(source) -> FeatureGrid:
    """Parse one grid from a binary stream, validating every invariant."""
    head = source.read(_HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) != _HEADER.size:
        raise TruncatedError("header", _HEADER.size, len(head))
    magic, version, H, W, d, spacing, x0, y0 = _HEADER.unpack(head)
    if version != VERSION:
        raise BadVersionError(f"unsupported grid version {version}, expected {VERSION}")
    (tag_len,) = struct.unpack("<H", _read_exact(source, 2, "tag length"))
    tag = _read_exact(source, tag_len, "magnification tag").decode("utf-8")
    n_bits = (H * W + 7) // 8
    bits = np.frombuffer(_read_exact(source, n_bits, "validity bitmap"), dtype=np.uint8)
    valid = np.unpackbits(bits, bitorder="little")[: H * W].astype(bool).reshape(H, W)
    n_feat = H * W * d * 4
    feats = np.frombuffer(_read_exact(source, n_feat, "features"), dtype="<f4")
    feats = feats.astype(np.float32).reshape(H, W, d)
    try:
        return FeatureGrid(feats, valid, spacing, (x0, y0), tag)
    except InvariantError:
        raise
    except GridError as e:
        raise InvariantError(str(e)) from e


def grid_to_bytes(grid: FeatureGrid) -> bytes:
    buf = io.BytesIO()
    write_grid(grid, buf)
    return buf.getvalue()


def save_grid(grid: FeatureGrid, path) -> int:
    from .io import atomic_write

    with atomic_write(path) as fh:
        return write_grid(grid, fh)


def load_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        return read_grid(fh)
