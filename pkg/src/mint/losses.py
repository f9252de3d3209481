"""Training objectives: DINO self-distillation, CLS anchoring, masked expression regression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class DinoState:
    center: torch.Tensor  # (K,)
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError("center momentum must lie in [0, 1)")

    @classmethod
    def zeros(cls, k: int, **kw) -> "DinoState":
        return cls(center=torch.zeros(k), **kw)


@dataclass(frozen=True)
class LossWeights:
    distill: float = 100.0
    st: float = 100.0
    pst: float = 100.0

    def __post_init__(self):
        for name in ("distill", "st", "pst"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def dino_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, state: DinoState) -> torch.Tensor:
    """Cross-entropy between teacher globals and every other student view.

    Args:
        teacher_logits: ``(B, n_global, K)``; treated as constants.
        student_logits: ``(B, n_global + n_local, K)``, the first ``n_global``
            views aligned with the teacher's.

    Returns the mean over (teacher view, student view) pairs with differing
    view identity, then over the batch.
    """
    if teacher_logits.ndim == 2:
        teacher_logits, student_logits = teacher_logits[None], student_logits[None]
    b, n_g, k = teacher_logits.shape
    if student_logits.shape[-1] != k:
        raise ValueError(f"prototype count mismatch: {k} vs {student_logits.shape[-1]}")
    if n_g < 1 or student_logits.shape[1] < n_g:
        raise ValueError("student must see every teacher view")
    t = F.softmax((teacher_logits.detach() - state.center.to(teacher_logits)) / state.teacher_temp, dim=-1)
    log_s = F.log_softmax(student_logits / state.student_temp, dim=-1)
    ce = -torch.einsum("bik,bjk->bij", t, log_s)  # (B, n_g, n_views)
    n_views = student_logits.shape[1]
    keep = torch.ones(n_g, n_views, dtype=torch.bool, device=ce.device)
    keep[torch.arange(n_g), torch.arange(n_g)] = False
    n_pairs = int(keep.sum())
    if n_pairs == 0:
        raise ValueError("dino_loss needs at least one (teacher, student) pair with different views")
    return ce[:, keep].sum(dim=1).mean() / n_pairs


def dino_loss_single_pair(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    """``-sum_k p_t log p_s`` for explicit probability vectors (test helper)."""
    return -(p_t * torch.log(p_s.clamp_min(1e-300))).sum()


@torch.no_grad()
def update_center(state: DinoState, teacher_logits: torch.Tensor) -> DinoState:
    """EMA of the batch-mean teacher logits; returns a new state."""
    flat = teacher_logits.reshape(-1, teacher_logits.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("empty teacher batch")
    m = state.center_momentum
    new_center = m * state.center + (1.0 - m) * flat.mean(dim=0).to(state.center)
    return DinoState(new_center, state.student_temp, state.teacher_temp, m)


def distill_loss(student_cls: torch.Tensor, frozen_cls: torch.Tensor) -> torch.Tensor:
    """Mean over crops of ``||student - frozen||^2``; the frozen side is detached."""
    if student_cls.shape != frozen_cls.shape:
        raise ValueError(f"shape mismatch {tuple(student_cls.shape)} vs {tuple(frozen_cls.shape)}")
    diff = student_cls - frozen_cls.detach()
    return diff.pow(2).sum(dim=-1).mean()


def st_loss(pred: torch.Tensor, target: torch.Tensor, gene_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the genes selected by ``gene_mask``.

    ``pred``/``target``/``gene_mask`` may carry a leading batch axis, in which
    case the per-sample means are averaged. Unselected genes contribute an
    exactly-zero value and gradient.
    """
    gene_mask = gene_mask.to(torch.bool)
    if pred.shape != target.shape or pred.shape[-1] != gene_mask.shape[-1]:
        raise ValueError("pred/target/gene mask shape mismatch")
    n = gene_mask.sum(dim=-1)
    if torch.any(n == 0):
        raise ValueError("selected gene set is empty")
    sq = torch.where(gene_mask, pred - target, torch.zeros((), dtype=pred.dtype)).pow(2)
    return (sq.sum(dim=-1) / n).mean()


def gene_mask_from_indices(indices, n_genes: int) -> torch.Tensor:
    m = torch.zeros(n_genes, dtype=torch.bool)
    m[torch.as_tensor(indices, dtype=torch.long)] = True
    return m


def pst_loss(pred: torch.Tensor, targets: torch.Tensor, positive: torch.Tensor, panel: torch.Tensor) -> torch.Tensor:
    """Positive-only patch regression, restricted to panel genes.

    Args:
        pred: ``(N', G_xen)`` or ``(B, N', G_xen)``.
        targets: same shape as ``pred`` (log1p counts per patch).
        positive: ``(N',)``/``(B, N')`` patches with at least one transcript.
        panel: ``(G_xen,)``/``(B, G_xen)`` genes measured by the panel.

    Each sample contributes the mean over its positive patches of the mean
    over panel genes, or exactly 0 (with zero gradient) when it has no
    positive patch; the batch value is the mean over samples.
    """
    if pred.ndim == 2:
        pred, targets, positive, panel = pred[None], targets[None], positive[None], panel[None]
    if pred.shape != targets.shape or positive.shape != pred.shape[:2] or panel.shape != (pred.shape[0], pred.shape[2]):
        raise ValueError("pred/target grid/panel shape mismatch")
    positive, panel = positive.to(torch.bool), panel.to(torch.bool)
    n_genes = panel.sum(dim=-1)
    if torch.any(n_genes == 0):
        raise ValueError("panel gene set is empty")
    sel = positive[:, :, None] & panel[:, None, :]
    sq = torch.where(sel, pred - targets, torch.zeros((), dtype=pred.dtype)).pow(2)
    per_patch = sq.sum(dim=-1) / n_genes[:, None]
    n_pos = positive.sum(dim=-1)
    per_sample = per_patch.sum(dim=-1) / n_pos.clamp_min(1)
    return per_sample.mean()


def total_loss(l_dino, l_distill, l_st, l_pst, w: LossWeights):
    """``l_dino + w.distill*l_distill + w.st*l_st + w.pst*l_pst``.

    Raises:
        ValueError: naming the first non-finite component.
    """
    for name, v in (("l_dino", l_dino), ("l_distill", l_distill), ("l_st", l_st), ("l_pst", l_pst)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise FloatingPointError(f"non-finite loss component {name}")
    return l_dino + w.distill * l_distill + w.st * l_st + w.pst * l_pst
