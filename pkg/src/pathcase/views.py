"""Multi-crop views, spatial augmentation, block masking, token dropout and capping."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import FeatureGrid


class SamplingExhausted(RuntimeError):
    def __init__(self, attempts, best_ratio):
        super().__init__(
            f"no crop met the valid-token ratio after {attempts} attempts "
            f"(best ratio {best_ratio:.3f})"
        )
        self.attempts = attempts
        self.best_ratio = best_ratio


@dataclass(frozen=True, eq=False)
class Crop:
    """A window of a grid with per-cell level-0 coordinates.

    ``window`` is ``(row0, col0, height, width)`` in source-grid cells.  For
    Stage-2 full-grid views the window covers the whole grid.
    """

    features: np.ndarray
    validity: np.ndarray
    coords: np.ndarray
    spacing: float
    kind: str
    window: tuple
    augment: tuple = (False, False, 0)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())

    @property
    def valid_ratio(self) -> float:
        return self.n_valid / self.validity.size


@dataclass(frozen=True, eq=False)
class BlockMask:
    mask: np.ndarray
    ratio: float


@dataclass
class ViewBatch:
    globals: list
    locals: list
    masks: list = field(default_factory=list)


@dataclass(frozen=True)
class ViewConfig:
    n_global: int = 2
    global_size: int = 20
    n_local: int = 4
    local_size: int = 12
    min_valid_ratio: float = 0.25
    max_attempts: int = 3
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    mask_min: float = 0.1
    mask_max: float = 0.5
    mask_min_block: int = 4
    mask_min_aspect: float = 0.3
    mask_prob: float = 0.5


def _window(features, validity, coords, row0, col0, h, w):
    return (
        features[row0:row0 + h, col0:col0 + w],
        validity[row0:row0 + h, col0:col0 + w],
        coords[row0:row0 + h, col0:col0 + w],
    )


def full_view(grid: FeatureGrid) -> Crop:
    return Crop(
        grid.features, grid.validity, grid.cell_coords(), grid.spacing, "full",
        (0, 0, grid.height, grid.width),
    )


def sample_crop(grid: FeatureGrid, size: int, min_valid_ratio: float, rng,
                max_attempts: int = 3, kind: str = "global") -> Crop:
    """Draw a ``size x size`` window uniformly until its valid ratio reaches ``min_valid_ratio``."""
    if size > min(grid.height, grid.width):
        raise ValueError(f"crop size {size} exceeds grid {grid.height}x{grid.width}")
    if not 0 < min_valid_ratio <= 1:
        raise ValueError(f"min_valid_ratio must be in (0, 1], got {min_valid_ratio}")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    coords = grid.cell_coords()
    best = 0.0
    for _ in range(max_attempts):
        r0 = int(rng.integers(0, grid.height - size + 1))
        c0 = int(rng.integers(0, grid.width - size + 1))
        f, v, p = _window(grid.features, grid.validity, coords, r0, c0, size, size)
        ratio = v.sum() / (size * size)
        best = max(best, ratio)
        if ratio >= min_valid_ratio:
            return Crop(f, v, p, grid.spacing, kind, (r0, c0, size, size))
    raise SamplingExhausted(max_attempts, best)


def densest_crop(grid: FeatureGrid, size: int, kind: str = "global") -> Crop:
    """The window with the most valid cells (first in raster order on ties)."""
    h, w = min(size, grid.height), min(size, grid.width)
    csum = np.pad(grid.validity.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    counts = csum[h:, w:] - csum[:-h, w:] - csum[h:, :-w] + csum[:-h, :-w]
    r0, c0 = np.unravel_index(int(np.argmax(counts)), counts.shape)
    f, v, p = _window(grid.features, grid.validity, grid.cell_coords(), r0, c0, h, w)
    if (h, w) != (size, size):
        # grid smaller than the crop: pad with invalid cells on the far side
        pad = ((0, size - h), (0, size - w))
        f = np.pad(f, pad + ((0, 0),))
        v = np.pad(v, pad)
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        p = np.stack([p[0, 0, 0] + cols * grid.spacing, p[0, 0, 1] + rows * grid.spacing], -1)
    return Crop(f, v, p, grid.spacing, kind, (int(r0), int(c0), size, size))


def apply_spatial_augment(crop: Crop, p_h: float, p_v: float, p_r: float, rng) -> Crop:
    """Random flips and a random quarter-turn; coordinates travel with their cells."""
    u = rng.random(3)
    k = int(rng.integers(1, 4))
    hflip, vflip, rot = bool(u[0] < p_h), bool(u[1] < p_v), (k if u[2] < p_r else 0)
    f, v, p = crop.features, crop.validity, crop.coords
    if hflip:
        f, v, p = f[:, ::-1], v[:, ::-1], p[:, ::-1]
    if vflip:
        f, v, p = f[::-1], v[::-1], p[::-1]
    if rot:
        f, v, p = (np.rot90(a, rot, axes=(0, 1)) for a in (f, v, p))
    return dataclasses.replace(
        crop,
        features=np.ascontiguousarray(f),
        validity=np.ascontiguousarray(v),
        coords=np.ascontiguousarray(p),
        augment=(hflip, vflip, rot),
    )


def assign_mask_ratios(n_selected: int, ratio_min: float, ratio_max: float, rng) -> np.ndarray:
    """A shuffled ``linspace(ratio_min, ratio_max, n_selected)``."""
    if n_selected < 1:
        raise ValueError("n_selected must be >= 1")
    return rng.permutation(np.linspace(ratio_min, ratio_max, n_selected))


def build_block_mask(validity, ratio: float, min_aspect: float = 0.3,
                     max_aspect: float | None = None, min_block: int = 4, rng=None,
                     growth: float = 2.0, max_blocks: int = 64) -> BlockMask:
    """Mask exactly ``floor(ratio * n_valid)`` valid cells with rectangular blocks.

    Block areas start at ``min_block`` and grow geometrically; aspect ratios
    are log-uniform in ``[min_aspect, max_aspect]``.  A block's top-left may
    hang off the crop (it is clipped) so every cell is equally likely to be
    covered.  Overshoot is trimmed and any shortfall filled with single
    tokens, both uniformly at random.
    """
    valid = np.asarray(validity, dtype=bool)
    if not 0 < ratio <= 1:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
    if max_aspect is None:
        max_aspect = 1.0 / min_aspect
    H, W = valid.shape
    n_valid = int(valid.sum())
    target = math.floor(ratio * n_valid)
    mask = np.zeros_like(valid)
    if target == 0:
        return BlockMask(mask, ratio)

    lo, hi = math.log(min_aspect), math.log(max_aspect)
    area = float(min_block)
    count = 0
    for _ in range(max_blocks):
        remaining = target - count
        if remaining < min_block:
            break
        a = max(float(min_block), min(area, float(remaining)))
        aspect = math.exp(rng.uniform(lo, hi))
        h = int(min(H, max(1, round(math.sqrt(a * aspect)))))
        w = int(min(W, max(1, round(math.sqrt(a / aspect)))))
        top = int(rng.integers(-h + 1, H))
        left = int(rng.integers(-w + 1, W))
        mask[max(top, 0):top + h, max(left, 0):left + w] = True
        mask &= valid
        count = int(mask.sum())
        area *= growth

    if count > target:
        on = np.flatnonzero(mask.ravel())
        drop = rng.choice(on, count - target, replace=False)
        mask.ravel()[drop] = False
    elif count < target:
        off = np.flatnonzero((valid & ~mask).ravel())
        add = rng.choice(off, target - count, replace=False)
        mask.ravel()[add] = True
    return BlockMask(mask, ratio)


def token_dropout(view, max_ratio: float, rng):
    """Invalidate ``floor(rho * V)`` random valid cells, ``rho ~ U[0, max_ratio]``.

    Works on a :class:`FeatureGrid` or a :class:`Crop` and returns the same
    type.  At least one valid cell always survives.
    """
    if not 0 <= max_ratio < 1:
        raise ValueError(f"max dropout ratio must be in [0, 1), got {max_ratio}")
    rho = rng.uniform(0.0, max_ratio) if max_ratio > 0 else 0.0
    return drop_cells(view, rho, rng)


def drop_cells(view, rho: float, rng):
    n_valid = int(view.validity.sum())
    n_drop = min(math.floor(rho * n_valid), n_valid - 1)
    if n_drop <= 0:
        return view
    on = np.flatnonzero(view.validity.ravel())
    drop = rng.choice(on, n_drop, replace=False)
    valid = view.validity.copy()
    valid.ravel()[drop] = False
    feats = np.where(valid[..., None], view.features, np.float32(0))
    return dataclasses.replace(view, features=feats, validity=valid)


def cap_tokens(n_valid: int, cap: int, rng) -> np.ndarray:
    """Stratified subsample of valid-token ranks: one uniform draw per equal-width bin."""
    if n_valid < 1 or cap < 1:
        raise ValueError(f"need n_valid >= 1 and cap >= 1, got {n_valid}, {cap}")
    if n_valid <= cap:
        return np.arange(n_valid)
    b = np.arange(cap)
    start = (b * n_valid) // cap
    end = ((b + 1) * n_valid) // cap - 1
    width = np.maximum(1, end - start + 1)
    return start + rng.integers(0, width)


def make_views(grid: FeatureGrid, cfg: ViewConfig, rng) -> ViewBatch:
    """Sample and augment the global and local crops for one slide.

    Crops come from independent sub-streams; exhausted sampling falls back
    to the densest window so one sparse slide cannot stall training.
    """
    from .rng import child

    out = {}
    for kind, n, size in (("global", cfg.n_global, cfg.global_size),
                          ("local", cfg.n_local, cfg.local_size)):
        crops = []
        for i in range(n):
            r = child(rng, kind, i)
            try:
                c = sample_crop(grid, size, cfg.min_valid_ratio, r, cfg.max_attempts, kind)
            except (SamplingExhausted, ValueError):
                c = densest_crop(grid, size, kind)
            crops.append(apply_spatial_augment(c, cfg.p_hflip, cfg.p_vflip, cfg.p_rotate, r))
        out[kind] = crops
    return ViewBatch(out["global"], out["local"], [None] * cfg.n_global)


def mask_global_views(batch: list, cfg: ViewConfig, rng) -> None:
    """Select global crops for masking across a batch and attach block masks in place."""
    crops = [(vb, j) for vb in batch for j in range(len(vb.globals))]
    selected = [cj for cj in crops if rng.random() < cfg.mask_prob]
    for vb, j in crops:
        vb.masks[j] = None
    if not selected:
        return
    ratios = assign_mask_ratios(len(selected), cfg.mask_min, cfg.mask_max, rng)
    for (vb, j), ratio in zip(selected, ratios):
        crop = vb.globals[j]
        if crop.n_valid == 0:
            continue
        vb.masks[j] = build_block_mask(
            crop.validity, float(ratio), cfg.mask_min_aspect, None, cfg.mask_min_block, rng
        )
