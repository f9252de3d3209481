"""Finite-difference verification of the four objectives and their weighted sum.

Everything runs in float64 on a tiny student so that central differences with
``h = 1e-5`` are accurate to many digits. Inputs (views, targets, masks) are
fixed random tensors; the teacher and frozen anchor are held constant, as they
are during a real optimisation step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from mint.backbone import BackboneConfig, VisionTransformer
from mint.losses import distill_loss, dino_loss, pst_loss, st_loss, total_loss
from mint.trainer.config import CropConfig, HeadConfig, TrainConfig
from mint.trainer.loop import TrainState, _encode, init_train

LOSS_NAMES = ("dino", "distill", "st", "pst", "total")
TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    n_coords: dict[str, int]
    masked_exact_zero: bool
    linearity_err: float
    seconds: float
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (
            all(v < TOLERANCE for v in self.max_rel_err.values())
            and self.masked_exact_zero
            and self.linearity_err < 1e-8
        )

    def lines(self) -> list[str]:
        out = [f"{k}: max_rel_err={v:.3e} coords={self.n_coords[k]}" for k, v in self.max_rel_err.items()]
        out.append(f"masked gene gradient exactly zero: {self.masked_exact_zero}")
        out.append(f"total vs weighted sum of parts: {self.linearity_err:.3e}")
        return out


def tiny_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        dtype="float64",
        seed=seed,
        backbone=BackboneConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, n_heads=2),
        heads=HeadConfig(n_prototypes=16),
        crops=CropConfig(n_global=2, global_size=16, n_local=2, local_size=8),
    )


@dataclass
class _Problem:
    state: TrainState
    globals: torch.Tensor
    locals: torch.Tensor
    spot_y: torch.Tensor
    spot_mask: torch.Tensor
    pst_y: torch.Tensor
    pst_pos: torch.Tensor
    pst_panel: torch.Tensor
    n_spot: int
    # teacher logits and anchor CLS do not depend on student parameters
    t_logits: torch.Tensor | None = None
    f_cls: torch.Tensor | None = None


def _problem(seed: int, G: int, G_xen: int) -> _Problem:
    cfg = tiny_config(seed)
    gen = torch.Generator().manual_seed(seed)
    base = VisionTransformer(cfg.backbone, generator=gen).double()
    state = init_train(base, cfg, G, G_xen)
    # move off the init point so the teacher, anchor and student all differ
    with torch.no_grad():
        for p in state.student.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    b, c = 3, cfg.backbone.in_chans
    cr = cfg.crops
    g = torch.rand(b, cr.n_global, c, cr.global_size, cr.global_size, generator=gen, dtype=torch.float64)
    loc = torch.rand(b, cr.n_local, c, cr.local_size, cr.local_size, generator=gen, dtype=torch.float64)
    n_spot = 2
    spot_y = torch.rand(n_spot, cr.n_global, G, generator=gen, dtype=torch.float64) * 3
    spot_mask = torch.ones(n_spot, cr.n_global, G, dtype=torch.bool)
    spot_mask[:, :, G - 1] = False  # one gene never measured
    n_p = (cr.global_size // cfg.backbone.patch_size) ** 2
    n_x = (b - n_spot) * cr.n_global
    pst_y = torch.rand(n_x, n_p, G_xen, generator=gen, dtype=torch.float64) * 2
    pst_pos = torch.rand(n_x, n_p, generator=gen) < 0.5
    pst_pos[:, 0] = True
    pst_panel = torch.ones(n_x, G_xen, dtype=torch.bool)
    pst_panel[:, -1] = False
    pst_y = torch.where(pst_pos[..., None], pst_y, torch.zeros_like(pst_y))
    pb = _Problem(state, g, loc, spot_y, spot_mask, pst_y, pst_pos, pst_panel, n_spot)
    with torch.no_grad():
        pb.t_logits = state.teacher.dino_head(_encode(state.teacher.backbone, g, False)[0])
        pb.f_cls = torch.cat([_encode(state.frozen, g, False)[0], _encode(state.frozen, loc, False)[0]], dim=1)
    return pb


def _losses(pb: _Problem) -> dict[str, torch.Tensor]:
    st = pb.state
    s = st.student
    cls_g, st_g, pat_g = _encode(s.backbone, pb.globals, False)
    cls_l = _encode(s.backbone, pb.locals, False)[0]
    s_cls = torch.cat([cls_g, cls_l], dim=1)
    out = {
        "dino": dino_loss(pb.t_logits, s.dino_head(s_cls), st.dino_state),
        "distill": distill_loss(s_cls, pb.f_cls),
        "st": st_loss(s.st_head(st_g[: pb.n_spot]), pb.spot_y, pb.spot_mask),
    }
    pat = pat_g[pb.n_spot :]
    out["pst"] = pst_loss(s.pst_head(pat.reshape(-1, *pat.shape[2:])), pb.pst_y, pb.pst_pos, pb.pst_panel)
    out["total"] = total_loss(out["dino"], out["distill"], out["st"], out["pst"], st.cfg.weights)
    return out


def _coords(params: dict[str, torch.Tensor], per_tensor: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    picks = []
    for name, p in params.items():
        n = p.numel()
        idx = np.arange(n) if n <= per_tensor or name.endswith("st_token") else rng.choice(n, per_tensor, replace=False)
        picks.extend((name, int(i)) for i in np.sort(idx))
    return picks


def gradcheck(seed: int = 0, h: float = 1e-5, per_tensor: int = 6, G: int = 4, G_xen: int = 4, floor: float = 1e-6) -> GradcheckReport:
    """Compare autograd to central differences for every loss and for the total.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor * g)``
    with ``g = max(1, max |grad|)`` of that loss. Finite-difference roundoff
    scales with the loss value, so without the scaled floor coordinates whose
    gradient is ~1e-9 of the largest would dominate the weighted total.
    """
    t0 = time.perf_counter()
    pb = _problem(seed, G, G_xen)
    params = dict(pb.state.student.named_parameters())
    rng = np.random.default_rng(seed)
    coords = _coords(params, per_tensor, rng)

    analytic: dict[str, dict[str, torch.Tensor]] = {}
    for name in LOSS_NAMES:
        pb.state.student.zero_grad(set_to_none=True)
        _losses(pb)[name].backward()
        analytic[name] = {k: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}

    gscale = {k: max(1.0, max(float(g.abs().max()) for g in analytic[k].values())) for k in LOSS_NAMES}
    max_err = {k: 0.0 for k in LOSS_NAMES}
    with torch.no_grad():
        for pname, i in coords:
            flat = params[pname].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = {k: v.item() for k, v in _losses(pb).items()}
            flat[i] = orig - h
            dn = {k: v.item() for k, v in _losses(pb).items()}
            flat[i] = orig
            for k in LOSS_NAMES:
                num = (up[k] - dn[k]) / (2 * h)
                a = analytic[k][pname].view(-1)[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor * gscale[k])
                max_err[k] = max(max_err[k], err)

    # the unmeasured gene's output row: exact zeros, analytically and numerically
    w_row = params["st_head.fc2.weight"]
    masked = bool(torch.all(analytic["st"]["st_head.fc2.weight"][G - 1] == 0))
    with torch.no_grad():
        orig = w_row[G - 1, 0].item()
        w_row[G - 1, 0] = orig + h
        up = _losses(pb)["st"].item()
        w_row[G - 1, 0] = orig - h
        dn = _losses(pb)["st"].item()
        w_row[G - 1, 0] = orig
    masked = masked and up == dn

    w = pb.state.cfg.weights
    scale = {"dino": 1.0, "distill": w.distill, "st": w.st, "pst": w.pst}
    lin = 0.0
    for k in params:
        combo = sum(scale[n] * analytic[n][k] for n in scale)
        ref = analytic["total"][k]
        lin = max(lin, float((combo - ref).abs().max() / max(ref.abs().max().item(), 1.0)))

    return GradcheckReport(
        max_rel_err=max_err,
        n_coords={k: len(coords) for k in LOSS_NAMES},
        masked_exact_zero=masked,
        linearity_err=lin,
        seconds=time.perf_counter() - t0,
        meta={"seed": seed, "h": h, "floor": floor, "n_params": sum(p.numel() for p in params.values())},
    )
