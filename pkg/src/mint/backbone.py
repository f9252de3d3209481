"""Vision Transformer with an optional learnable ST token.

Token sequence is ``[CLS, ST, patch_1 .. patch_N]``. Positional embeddings
cover CLS and the patch grid only; the ST token is aspatial unless
``st_pos_embed`` is set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3
    has_st_token: bool = False
    st_pos_embed: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


class ForwardOutput(NamedTuple):
    cls: torch.Tensor  # (B, D)
    st: torch.Tensor | None  # (B, D)
    patches: torch.Tensor  # (B, N', D)


def trunc_normal_(t: torch.Tensor, std: float = 0.02, generator: torch.Generator | None = None) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)


def interpolate_pos_embed(pos: torch.Tensor, target: int) -> torch.Tensor:
    """Resize a ``(1, 1 + n*n, D)`` table to ``(1, 1 + target*target, D)``.

    Bicubic on the patch grid; the leading CLS entry is passed through.
    """
    n_grid = pos.shape[1] - 1
    n = int(round(n_grid**0.5))
    if n * n != n_grid:
        raise ValueError(f"positional table has {n_grid} grid entries, not a square")
    if target == n:
        return pos
    cls_pos, grid = pos[:, :1], pos[:, 1:]
    d = pos.shape[-1]
    grid = grid.reshape(1, n, n, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(target, target), mode="bicubic", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, target * target, d)
    return torch.cat([cls_pos, grid], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.n_patches, d))
        self.st_token = nn.Parameter(torch.zeros(1, 1, d)) if cfg.has_st_token else None
        self.st_pos = nn.Parameter(torch.zeros(1, 1, d)) if cfg.has_st_token and cfg.st_pos_embed else None
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self._init(generator)

    @torch.no_grad()
    def _init(self, g: torch.Generator | None) -> None:
        for p in (self.cls_token, self.pos_embed, self.st_token):
            if p is not None:
                trunc_normal_(p, generator=g)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight, generator=g)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                w = m.weight.view(m.weight.shape[0], -1)
                nn.init.kaiming_uniform_(w, a=5**0.5, generator=g)
                nn.init.zeros_(m.bias)

    @property
    def has_st_token(self) -> bool:
        return self.st_token is not None

    def tokens(self, images: torch.Tensor) -> tuple[torch.Tensor, int]:
        ps = self.cfg.patch_size
        b, _, h, w = images.shape
        if h % ps or w % ps or h != w:
            raise ValueError(f"crop {h}x{w} must be square and divisible by patch size {ps}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        pos = interpolate_pos_embed(self.pos_embed, h // ps)
        x = x + pos[:, 1:]
        cls = (self.cls_token + pos[:, :1]).expand(b, -1, -1)
        parts = [cls]
        if self.st_token is not None:
            st = self.st_token if self.st_pos is None else self.st_token + self.st_pos
            parts.append(st.expand(b, -1, -1))
        return torch.cat(parts + [x], dim=1), len(parts)

    def forward(self, images: torch.Tensor, mask_st: bool = False) -> ForwardOutput:
        """Encode a ``(B, C, H, W)`` batch.

        ``mask_st`` blocks attention to and from the ST token (debug path);
        the returned ``st`` is then ``None``.
        """
        if not torch.isfinite(images).all():
            raise ValueError("non-finite input image")
        x, n_special = self.tokens(images)
        mask = None
        if mask_st and self.st_token is not None:
            is_st = torch.zeros(x.shape[1], dtype=torch.bool, device=x.device)
            is_st[1] = True
            mask = is_st[:, None] == is_st[None, :]
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        st = x[:, 1] if self.st_token is not None and not mask_st else None
        return ForwardOutput(cls=x[:, 0], st=st, patches=x[:, n_special:])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def extend_with_st_token(model: VisionTransformer, generator: torch.Generator | None = None) -> VisionTransformer:
    """Copy of ``model`` with a freshly initialized ST token; all other weights identical."""
    if model.has_st_token:
        raise ValueError("backbone already has an ST token")
    cfg = BackboneConfig(**{**model.cfg.to_dict(), "has_st_token": True})
    ext = VisionTransformer(cfg).to(next(model.parameters()).dtype)
    missing, unexpected = ext.load_state_dict(model.state_dict(), strict=False)
    assert not unexpected and set(missing) <= {"st_token", "st_pos"}, (missing, unexpected)
    with torch.no_grad():
        trunc_normal_(ext.st_token, generator=generator)
        if ext.st_pos is not None:
            ext.st_pos.zero_()
    return ext
