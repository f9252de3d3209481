"""Point geometry under crop/resize/flip, and transcript-to-patch binning.

Point coordinates are pixel-centre coordinates: an image flip maps pixel
``i`` to ``W - 1 - i`` and the same formula is applied to points. Binning
uses half-open patch intervals ``[i * ps, (i + 1) * ps)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CropGeometry:
    """Crop box ``[x0, x0 + w) x [y0, y0 + h)`` resized to ``out_w x out_h``, then optional h-flip."""

    x0: float
    y0: float
    w: float
    h: float
    out_w: int
    out_h: int
    flip: bool = False

    @classmethod
    def identity(cls, size: int) -> "CropGeometry":
        return cls(0.0, 0.0, float(size), float(size), size, size, False)

    @property
    def scale(self) -> tuple[float, float]:
        return self.out_w / self.w, self.out_h / self.h

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x0", "y0", "w", "h", "out_w", "out_h", "flip")}


def map_points(xy: np.ndarray, geom: CropGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(n, 2)`` points into the output frame.

    Returns the mapped points and a boolean ``keep`` mask (length ``n``)
    marking points that land inside the output frame.
    """
    if geom.w <= 0 or geom.h <= 0 or geom.out_w <= 0 or geom.out_h <= 0:
        raise ValueError(f"degenerate transform: {geom}")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    sx, sy = geom.scale
    x = (xy[:, 0] - geom.x0 + 0.5) * sx - 0.5
    y = (xy[:, 1] - geom.y0 + 0.5) * sy - 0.5
    if geom.flip:
        x = (geom.out_w - 1) - x
    keep = (x >= 0) & (x < geom.out_w) & (y >= 0) & (y < geom.out_h)
    return np.stack([x, y], axis=1), keep


def apply_geometry_to_points(xy, geom: CropGeometry) -> np.ndarray:
    """Map points through ``geom`` and drop those outside the output frame."""
    mapped, keep = map_points(xy, geom)
    return mapped[keep]


def transform_transcripts(transcripts: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """Same as :func:`apply_geometry_to_points` for ``(n, 3)`` rows of ``(x, y, gene)``."""
    t = np.asarray(transcripts, dtype=np.float64).reshape(-1, 3)
    mapped, keep = map_points(t[:, :2], geom)
    return np.concatenate([mapped[keep], t[keep, 2:3]], axis=1)


@dataclass
class PatchTargetGrid:
    counts: np.ndarray  # (P, P, G_xen) log1p of raw counts
    positive_mask: np.ndarray  # (P, P)

    @property
    def n_cells(self) -> int:
        return int(self.positive_mask.size)


def bin_transcripts_to_patches(transcripts, tile_size: int, patch_size: int, n_genes: int) -> PatchTargetGrid:
    """Aggregate ``(x, y, gene)`` rows into a per-patch log1p count grid.

    Rows outside ``[0, tile_size)`` on either axis are ignored. Grid index is
    ``[row, col]`` = ``[y // ps, x // ps]``.
    """
    if tile_size % patch_size:
        raise ValueError(f"tile_size {tile_size} not divisible by patch_size {patch_size}")
    p = tile_size // patch_size
    t = np.asarray(transcripts, dtype=np.float64).reshape(-1, 3)
    x, y, g = t[:, 0], t[:, 1], t[:, 2].astype(np.int64)
    inb = (x >= 0) & (x < tile_size) & (y >= 0) & (y < tile_size)
    if np.any((g[inb] < 0) | (g[inb] >= n_genes)):
        raise ValueError("transcript gene index outside the vocabulary")
    col = np.floor(x[inb] / patch_size).astype(np.int64)
    row = np.floor(y[inb] / patch_size).astype(np.int64)
    flat = (row * p + col) * n_genes + g[inb]
    raw = np.bincount(flat, minlength=p * p * n_genes).reshape(p, p, n_genes)
    return PatchTargetGrid(counts=np.log1p(raw.astype(np.float64)), positive_mask=raw.sum(axis=2) >= 1)
