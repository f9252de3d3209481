"""Student / EMA-teacher / frozen-anchor training."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from mint.backbone import VisionTransformer, extend_with_st_token
from mint.dataset.container import load_arrays, save_arrays
from mint.dataset.expression import compute_hvg, hvg_coin
from mint.dataset.geometry import bin_transcripts_to_patches, transform_transcripts
from mint.dataset.manifest import SpotSample, XeniumSample
from mint.heads import DinoHead, RegressionHead
from mint.losses import DinoState, LossWeights, dino_loss, distill_loss, pst_loss, st_loss, total_loss, update_center
from mint.trainer.augment import make_crops_batch
from mint.trainer.config import TrainConfig

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class Student(nn.Module):
    def __init__(self, backbone: VisionTransformer, dino_head: DinoHead, st_head: RegressionHead, pst_head: RegressionHead):
        super().__init__()
        self.backbone = backbone
        self.dino_head = dino_head
        self.st_head = st_head
        self.pst_head = pst_head


class Teacher(nn.Module):
    def __init__(self, backbone: VisionTransformer, dino_head: DinoHead):
        super().__init__()
        self.backbone = backbone
        self.dino_head = dino_head


@dataclass
class TrainState:
    cfg: TrainConfig
    student: Student
    teacher: Teacher
    frozen: VisionTransformer
    dino_state: DinoState
    optimizer: torch.optim.Optimizer
    step: int = 0

    @property
    def mask_st(self) -> bool:
        # the CLS ablations train without any ST pathway
        return self.cfg.mode != "mint"


def build_heads(cfg: TrainConfig, G: int, G_xen: int, generator: torch.Generator):
    d = cfg.backbone.embed_dim
    h = cfg.heads
    dino = DinoHead(d, h.n_prototypes, h.dino_hidden or 4 * d, h.dino_bottleneck or d, generator=generator)
    st = RegressionHead(d, G, h.reg_hidden or 2 * d, generator=generator)
    pst = RegressionHead(d, G_xen, h.reg_hidden or 2 * d, generator=generator)
    return dino, st, pst


def make_optimizer(cfg: TrainConfig, student: Student) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in student.named_parameters():
        (no_decay if p.ndim <= 1 or name.endswith(("cls_token", "st_token", "pos_embed", "st_pos")) else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=tuple(cfg.betas), foreach=False)


def init_train(base: VisionTransformer, cfg: TrainConfig, G: int, G_xen: int) -> TrainState:
    """Frozen anchor := ``base``; student := base + ST token + fresh heads; teacher := copy of student."""
    if base.has_st_token:
        raise ValueError("base backbone must not carry an ST token")
    dtype = _DTYPES[cfg.dtype]
    gen = torch.Generator().manual_seed(cfg.seed)
    base = base.to(dtype)
    frozen = copy.deepcopy(base).requires_grad_(False)
    backbone = extend_with_st_token(base, generator=gen)
    dino, st, pst = build_heads(cfg, G, G_xen, gen)
    student = Student(backbone, dino, st, pst).to(dtype)
    teacher = Teacher(copy.deepcopy(student.backbone), copy.deepcopy(student.dino_head)).requires_grad_(False)
    dino_state = DinoState(
        torch.zeros(cfg.heads.n_prototypes, dtype=dtype),
        cfg.student_temp,
        cfg.teacher_temp,
        cfg.center_momentum,
    )
    return TrainState(cfg, student, teacher, frozen, dino_state, make_optimizer(cfg, student))


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``min_lr_ratio * lr`` at the last step."""
    total = max(cfg.iterations, 1)
    warm = int(round(cfg.warmup_fraction * total))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    min_lr = cfg.min_lr_ratio * cfg.lr
    span = max(total - 1 - warm, 1)
    t = min(max(step - warm, 0) / span, 1.0)
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1 + math.cos(math.pi * t))


def ema_momentum_at(cfg: TrainConfig, step: int) -> float:
    t = min(step / max(cfg.iterations - 1, 1), 1.0)
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * 0.5 * (1 + math.cos(math.pi * t))


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> nn.Module:
    """``teacher <- m * teacher + (1 - m) * student`` for every matching parameter.

    Uses ``lerp`` so the result always lies between the two endpoints; m=0
    copies the student exactly and m=1 leaves the teacher untouched.
    """
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    for name, tp in t_params.items():
        sp = s_params.get(name)
        if sp is None or sp.shape != tp.shape:
            raise ValueError(f"teacher/student parameter mismatch at {name!r}")
        if m == 1.0:
            continue
        tp.lerp_(sp, 1.0 - m)
    return teacher


def oversampled_pool(is_xenium: list[bool], factor: int) -> np.ndarray:
    return np.concatenate([np.full(factor if x else 1, i) for i, x in enumerate(is_xenium)]) if is_xenium else np.zeros(0, int)


def build_batch(samples: list, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn uniformly (with replacement) from the multiset where Xenium entries repeat ``xenium_oversample`` times."""
    if not samples:
        raise ValueError("empty training set")
    pool = oversampled_pool([s.modality == "xenium" for s in samples], cfg.xenium_oversample)
    return pool[rng.integers(0, pool.size, size=cfg.batch_size)]


class SlideGeneSets:
    """Measured genes and top-k HVGs for every training slide (boolean masks)."""

    def __init__(self, samples: Iterable, k: int):
        by_slide: dict[str, list[SpotSample]] = {}
        for s in samples:
            if isinstance(s, SpotSample):
                by_slide.setdefault(s.slide_id, []).append(s)
        self.measured: dict[str, np.ndarray] = {}
        self.hvg: dict[str, np.ndarray] = {}
        for sid, group in sorted(by_slide.items()):
            mask = group[0].measured_mask.astype(bool)
            self.measured[sid] = mask
            hv = np.zeros_like(mask)
            if len(group) >= 2:
                hv[compute_hvg(np.stack([g.expression for g in group]), mask, min(k, int(mask.sum())))] = True
            else:
                hv = mask.copy()
            self.hvg[sid] = hv

    def mask(self, slide_id: str, use_hvg: bool) -> np.ndarray:
        return self.hvg[slide_id] if use_hvg else self.measured[slide_id]


def _encode(backbone: VisionTransformer, x: torch.Tensor, mask_st: bool):
    b, n = x.shape[:2]
    out = backbone(x.reshape(b * n, *x.shape[2:]), mask_st=mask_st)
    shape = lambda t: None if t is None else t.reshape(b, n, *t.shape[1:])  # noqa: E731
    return shape(out.cls), shape(out.st), shape(out.patches)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 0x5EED])


def train_step(state: TrainState, batch: list, gene_sets: SlideGeneSets, rng: np.random.Generator) -> dict:
    """One optimisation step on ``batch``; mutates ``state`` and returns the loss record."""
    cfg = state.cfg
    dtype = _DTYPES[cfg.dtype]
    w = cfg.effective_weights
    student, teacher, frozen = state.student, state.teacher, state.frozen

    images = torch.from_numpy(np.stack([s.tile for s in batch])).permute(0, 3, 1, 2).to(dtype)
    crops = make_crops_batch(images, cfg.crops, rng)
    use_hvg = hvg_coin(cfg.p_hvg, rng)
    n_g = cfg.crops.n_global

    s_cls_g, s_st_g, s_pat_g = _encode(student.backbone, crops.globals, state.mask_st)
    views = [s_cls_g]
    if cfg.crops.n_local:
        views.append(_encode(student.backbone, crops.locals, state.mask_st)[0])
    s_cls = torch.cat(views, dim=1)  # (B, V, D)
    s_logits = student.dino_head(s_cls)

    with torch.no_grad():
        t_cls = _encode(teacher.backbone, crops.globals, state.mask_st)[0]
        t_logits = teacher.dino_head(t_cls)
        f_views = [_encode(frozen, crops.globals, False)[0]]
        if cfg.crops.n_local:
            f_views.append(_encode(frozen, crops.locals, False)[0])
        f_cls = torch.cat(f_views, dim=1)

    l_dino = dino_loss(t_logits, s_logits, state.dino_state)
    l_distill = distill_loss(s_cls, f_cls)

    spot_idx = [i for i, s in enumerate(batch) if isinstance(s, SpotSample)]
    xen_idx = [i for i, s in enumerate(batch) if isinstance(s, XeniumSample)]
    zero = s_cls.sum() * 0

    if spot_idx:
        z = s_cls_g if state.mask_st else s_st_g
        pred = student.st_head(z[spot_idx])  # (n, n_g, G)
        y = torch.from_numpy(np.stack([batch[i].expression for i in spot_idx])).to(dtype)
        m = torch.from_numpy(np.stack([gene_sets.mask(batch[i].slide_id, use_hvg) for i in spot_idx]))
        l_st = st_loss(pred, y[:, None].expand_as(pred), m[:, None].expand(-1, n_g, -1))
    else:
        l_st = zero

    if xen_idx:
        ps = cfg.backbone.patch_size
        size = cfg.crops.global_size
        targets, positive, panels = [], [], []
        for i in xen_idx:
            s = batch[i]
            for geom in crops.global_geoms[i]:
                grid = bin_transcripts_to_patches(transform_transcripts(s.transcripts, geom), size, ps, s.panel_mask.size)
                targets.append(grid.counts.reshape(-1, grid.counts.shape[-1]))
                positive.append(grid.positive_mask.reshape(-1))
                panels.append(s.panel_mask)
        pred = student.pst_head(s_pat_g[xen_idx].reshape(len(xen_idx) * n_g, *s_pat_g.shape[2:]))
        l_pst = pst_loss(
            pred,
            torch.from_numpy(np.stack(targets)).to(dtype),
            torch.from_numpy(np.stack(positive)),
            torch.from_numpy(np.stack(panels)),
        )
    else:
        l_pst = zero

    loss = total_loss(l_dino, l_distill, l_st, l_pst, w)
    lr = lr_at(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    m_ema = ema_momentum_at(cfg, state.step)
    ema_update(teacher, student_teacher_view(student), m_ema)
    state.dino_state = update_center(state.dino_state, t_logits)
    state.step += 1
    return {
        "step": state.step,
        "lr": lr,
        "m": m_ema,
        "l_dino": l_dino.item(),
        "l_distill": l_distill.item(),
        "l_st": l_st.item(),
        "l_pst": l_pst.item(),
        "total": loss.item(),
        "use_hvg": use_hvg,
    }


def student_teacher_view(student: Student) -> nn.Module:
    """The part of the student the teacher mirrors (backbone + DINO head)."""
    view = nn.Module()
    view.backbone = student.backbone
    view.dino_head = student.dino_head
    return view


def params_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def _meta_bytes(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, mod in (("student", state.student), ("teacher", state.teacher), ("frozen", state.frozen)):
        for name, t in mod.state_dict().items():
            arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    arrays["dino.center"] = state.dino_state.center.cpu().numpy()
    opt = state.optimizer.state_dict()
    for pid, st in sorted(opt["state"].items()):
        for key, val in sorted(st.items()):
            arrays[f"optim.{pid}.{key}"] = torch.as_tensor(val).cpu().numpy().reshape(torch.as_tensor(val).shape)
    meta = {
        "step": state.step,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "mode": state.cfg.mode,
        "mask_st": state.mask_st,
        "G": state.student.st_head.fc2.out_features,
        "G_xen": state.student.pst_head.fc2.out_features,
        **(extra or {}),
    }
    arrays["__meta__"] = _meta_bytes(meta)
    save_arrays(path, arrays)


def load_checkpoint(path: str | Path) -> TrainState:
    arrays = load_arrays(path)
    meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    cfg = TrainConfig.from_dict(meta["config"])
    dtype = _DTYPES[cfg.dtype]
    base = VisionTransformer(cfg.backbone).to(dtype)
    state = init_train(base, cfg, meta["G"], meta["G_xen"])

    def load(prefix: str, mod: nn.Module):
        sd = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")}
        mod.load_state_dict(sd, strict=True)

    load("student", state.student)
    load("teacher", state.teacher)
    load("frozen", state.frozen)
    state.dino_state.center = torch.from_numpy(arrays["dino.center"])
    opt_sd = state.optimizer.state_dict()
    new_state: dict = {}
    for key, v in arrays.items():
        if key.startswith("optim."):
            _, pid, name = key.split(".", 2)
            new_state.setdefault(int(pid), {})[name] = torch.from_numpy(v)
    opt_sd["state"] = new_state
    state.optimizer.load_state_dict(opt_sd)
    state.step = int(meta["step"])
    return state


def checkpoint_meta(path: str | Path) -> dict:
    return json.loads(bytes(load_arrays(path)["__meta__"]).decode())


# ---------------------------------------------------------------- driver


def train(
    state: TrainState,
    samples: list,
    out_dir: str | Path | None = None,
    log_sink=None,
    quiet: bool = False,
    extra_meta: dict | None = None,
) -> TrainState:
    """Run ``cfg.iterations - state.step`` steps; write checkpoints + JSONL log into ``out_dir``."""
    cfg = state.cfg
    gene_sets = SlideGeneSets(samples, cfg.hvg_k)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logf = open(out / "train_log.jsonl", "w") if out is not None else None
    try:
        while state.step < cfg.iterations:
            rng = step_rng(cfg.seed, state.step)
            idx = build_batch(samples, cfg, rng)
            rec = train_step(state, [samples[i] for i in idx], gene_sets, rng)
            line = json.dumps(rec, sort_keys=True)
            if logf is not None and (rec["step"] % cfg.log_every == 0 or rec["step"] == cfg.iterations):
                logf.write(line + "\n")
            if log_sink is not None and not quiet and rec["step"] % cfg.log_every == 0:
                log_sink(line)
            if out is not None and (rec["step"] % cfg.checkpoint_every == 0 or rec["step"] == cfg.iterations):
                save_checkpoint(out / f"ckpt_{rec['step']:06d}.mnta", state, extra_meta)
        if out is not None:
            save_checkpoint(out / "final.mnta", state, extra_meta)
    finally:
        if logf is not None:
            logf.close()
    return state
