"""Projection heads: DINO prototype head and the two expression regressors."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from mint.backbone import trunc_normal_


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError("non-finite head input")


def _init_linear(modules, g: torch.Generator | None) -> None:
    for m in modules:
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, generator=g)
            nn.init.zeros_(m.bias)


class DinoHead(nn.Module):
    """3-layer MLP -> L2 normalize -> weight-normalized linear onto ``n_prototypes``.

    The last layer stores a direction matrix whose rows are normalized on
    every forward, so the effective prototype weights always have unit norm.
    """

    def __init__(self, in_dim: int, n_prototypes: int, hidden_dim: int, bottleneck_dim: int, generator=None):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Parameter(torch.empty(n_prototypes, bottleneck_dim))
        with torch.no_grad():
            _init_linear(self.mlp, generator)
            trunc_normal_(self.prototypes, generator=generator)

    def prototype_weights(self) -> torch.Tensor:
        return F.normalize(self.prototypes, dim=-1)

    def from_bottleneck(self, b: torch.Tensor) -> torch.Tensor:
        return F.normalize(b, dim=-1, eps=1e-12) @ self.prototype_weights().T

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_finite(z)
        return self.from_bottleneck(self.mlp(z))


class RegressionHead(nn.Module):
    """``D -> hidden -> out`` GELU MLP, applied over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None, generator=None):
        super().__init__()
        hidden_dim = hidden_dim or 2 * in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        with torch.no_grad():
            _init_linear((self.fc1, self.fc2), generator)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_finite(z)
        return self.fc2(F.gelu(self.fc1(z)))


def dino_head_forward(head: DinoHead, z: torch.Tensor) -> torch.Tensor:
    return head(z)


def st_head_forward(head: RegressionHead, z_st: torch.Tensor) -> torch.Tensor:
    return head(z_st)


def pst_head_forward(head: RegressionHead, z_pat: torch.Tensor) -> torch.Tensor:
    """Row-wise over ``(..., N', D)``; rows never interact."""
    return head(z_pat)
