"""Training configuration with strict (unknown-key rejecting) loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from mint.backbone import BackboneConfig
from mint.losses import LossWeights

CONFIG_SCHEMA_VERSION = 1
MODES = ("mint", "st_on_cls", "st_on_cls_no_distill")


@dataclass(frozen=True)
class CropConfig:
    n_global: int = 2
    global_size: int = 64
    global_scale: tuple[float, float] = (0.4, 1.0)
    n_local: int = 8
    local_size: int = 32
    local_scale: tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter: float = 0.2
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    augment: bool = True


@dataclass(frozen=True)
class HeadConfig:
    n_prototypes: int = 1024
    dino_hidden: int | None = None  # default 4*D
    dino_bottleneck: int | None = None  # default D
    reg_hidden: int | None = None  # default 2*D


@dataclass(frozen=True)
class TrainConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    mode: str = "mint"
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    min_lr_ratio: float = 1e-2
    warmup_fraction: float = 0.1
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    hvg_k: int = 16
    p_hvg: float = 0.5
    ema_start: float = 0.996
    ema_end: float = 1.0
    xenium_oversample: int = 5
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    crops: CropConfig = field(default_factory=CropConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if not 0.0 <= self.p_hvg <= 1.0:
            raise ValueError("p_hvg must lie in [0, 1]")
        if self.xenium_oversample < 1:
            raise ValueError("xenium_oversample must be >= 1")
        if not 0.0 <= self.ema_start <= 1.0 or not 0.0 <= self.ema_end <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.crops.n_global < 1:
            raise ValueError("need at least one global crop")
        for size in (self.crops.global_size, self.crops.local_size):
            if size % self.backbone.patch_size:
                raise ValueError(f"crop size {size} not divisible by patch size {self.backbone.patch_size}")

    @property
    def effective_weights(self) -> LossWeights:
        if self.mode == "st_on_cls_no_distill":
            return LossWeights(distill=0.0, st=self.weights.st, pst=self.weights.pst)
        return self.weights

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "train")

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        return cls.from_dict(deep_update(d, overrides or {}))


_NESTED = {"weights": LossWeights, "crops": CropConfig, "backbone": BackboneConfig, "heads": HeadConfig}


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"{where}: unknown config keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is TrainConfig else None
        if sub is not None:
            kw[k] = v if is_dataclass(v) else _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def deep_update(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(expr: str) -> dict:
    """``a.b.c=value`` -> nested dict; value parsed as JSON when possible."""
    if "=" not in expr:
        raise ValueError(f"override must look like key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return out
