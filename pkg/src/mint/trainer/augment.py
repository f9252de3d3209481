"""Multi-crop augmentation with recorded geometry.

Crops are sampled with numpy (so the stream is keyed by the caller's
generator) and rendered in one batched ``grid_sample`` call per crop size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from mint.dataset.geometry import CropGeometry
from mint.trainer.config import CropConfig


@dataclass
class CropBatch:
    globals: torch.Tensor  # (B, n_global, C, S, S)
    global_geoms: list[list[CropGeometry]]  # [B][n_global]
    locals: torch.Tensor  # (B, n_local, C, s, s)
    local_geoms: list[list[CropGeometry]]


def sample_crop_box(rng: np.random.Generator, size: int, scale: tuple[float, float], out: int, flip_prob: float) -> CropGeometry:
    """Random-resized-crop box (area fraction in ``scale``, aspect in [3/4, 4/3])."""
    area = size * size
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        w = math.sqrt(target * ratio)
        h = math.sqrt(target / ratio)
        if w <= size and h <= size:
            break
    else:
        w = h = min(size, math.sqrt(area * scale[1]))
    x0 = rng.uniform(0, size - w)
    y0 = rng.uniform(0, size - h)
    return CropGeometry(x0, y0, w, h, out, out, bool(rng.random() < flip_prob))


def _sampling_grid(geoms: list[CropGeometry], in_w: int, in_h: int, dtype) -> torch.Tensor:
    """``grid_sample`` grid mapping output pixel centres back to source pixel centres."""
    n = len(geoms)
    out = geoms[0].out_w
    j = np.arange(out, dtype=np.float64)
    gx = np.empty((n, out))
    gy = np.empty((n, out))
    for k, g in enumerate(geoms):
        src_j = (out - 1 - j) if g.flip else j
        gx[k] = g.x0 + (src_j + 0.5) * (g.w / g.out_w) - 0.5
        gy[k] = g.y0 + (j + 0.5) * (g.h / g.out_h) - 0.5
    u = (2 * gx + 1) / in_w - 1
    v = (2 * gy + 1) / in_h - 1
    grid = np.stack(np.broadcast_arrays(u[:, None, :], v[:, :, None]), axis=-1)
    return torch.from_numpy(grid).to(dtype)


def render_crops(images: torch.Tensor, src_index: list[int], geoms: list[CropGeometry]) -> torch.Tensor:
    """Crop/resize/flip ``images[src_index[k]]`` per ``geoms[k]`` (bilinear)."""
    _, _, h, w = images.shape
    grid = _sampling_grid(geoms, w, h, images.dtype)
    return F.grid_sample(images[src_index], grid, mode="bilinear", padding_mode="border", align_corners=False)


def color_jitter(x: torch.Tensor, rng: np.random.Generator, strength: float, prob: float) -> torch.Tensor:
    n = x.shape[0]
    active = rng.random(n) < prob
    b, c, s = (1 + np.where(active, rng.uniform(-strength, strength, n), 0.0) for _ in range(3))
    to = lambda a: torch.from_numpy(a).to(x.dtype)[:, None, None, None]  # noqa: E731
    x = x * to(b)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * to(c) + mean
    gray = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]).expand_as(x)
    x = (x - gray) * to(s) + gray
    return x.clamp(0.0, 1.0)


def gaussian_blur(x: torch.Tensor, rng: np.random.Generator, prob: float, sigma: tuple[float, float]) -> torch.Tensor:
    n, ch, h, w = x.shape
    active = rng.random(n) < prob
    sig = np.where(active, rng.uniform(*sigma, n), 0.0)
    taps = np.arange(-2, 3, dtype=np.float64)
    k = np.where(sig[:, None] > 0, np.exp(-(taps[None] ** 2) / (2 * np.maximum(sig, 1e-12)[:, None] ** 2)), (taps == 0)[None] * 1.0)
    k = k / k.sum(axis=1, keepdims=True)
    kt = torch.from_numpy(np.repeat(k, ch, axis=0)).to(x.dtype)
    y = x.reshape(1, n * ch, h, w)
    y = F.conv2d(F.pad(y, (2, 2, 0, 0), mode="replicate"), kt[:, None, None, :], groups=n * ch)
    y = F.conv2d(F.pad(y, (0, 0, 2, 2), mode="replicate"), kt[:, None, :, None], groups=n * ch)
    return y.reshape(n, ch, h, w)


def make_crops_batch(images: torch.Tensor, cfg: CropConfig, rng: np.random.Generator) -> CropBatch:
    """Global and local crops for every image of a ``(B, C, H, W)`` batch."""
    b, ch, h, w = images.shape
    if h != w:
        raise ValueError("tiles must be square")
    if cfg.augment:
        gg = [[sample_crop_box(rng, w, cfg.global_scale, cfg.global_size, cfg.flip_prob) for _ in range(cfg.n_global)] for _ in range(b)]
        lg = [[sample_crop_box(rng, w, cfg.local_scale, cfg.local_size, cfg.flip_prob) for _ in range(cfg.n_local)] for _ in range(b)]
    else:
        gg = [[CropGeometry(0.0, 0.0, w, h, cfg.global_size, cfg.global_size)] * cfg.n_global for _ in range(b)]
        lg = [[CropGeometry(0.0, 0.0, w, h, cfg.local_size, cfg.local_size)] * cfg.n_local for _ in range(b)]
    out = []
    for geoms, n in ((gg, cfg.n_global), (lg, cfg.n_local)):
        if n == 0:
            out.append(images.new_zeros((b, 0, ch, 1, 1)))
            continue
        flat = [g for row in geoms for g in row]
        src = [i for i in range(b) for _ in range(n)]
        x = render_crops(images, src, flat)
        if cfg.augment:
            x = color_jitter(x, rng, cfg.jitter, cfg.jitter_prob)
            x = gaussian_blur(x, rng, cfg.blur_prob, cfg.blur_sigma)
        out.append(x.reshape(b, n, ch, x.shape[-2], x.shape[-1]))
    return CropBatch(out[0], gg, out[1], lg)


def make_crops(tile: np.ndarray, cfg: CropConfig, rng: np.random.Generator) -> CropBatch:
    """Crops of a single ``(H, W, C)`` tile (batch axis of size 1)."""
    x = torch.from_numpy(np.ascontiguousarray(tile)).permute(2, 0, 1)[None].float()
    return make_crops_batch(x, cfg, rng)
