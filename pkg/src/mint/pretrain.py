"""Base-encoder pretraining: the stand-in for a pathology foundation model.

Fine-tuning needs an encoder that already carries morphological knowledge,
otherwise there is nothing to forget and nothing for the frozen anchor to
protect. The base here is a plain ViT trained to classify the dominant cell
type of tiles from slides disjoint from both fine-tuning and evaluation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from mint.backbone import BackboneConfig, VisionTransformer
from mint.dataset.container import load_arrays, save_arrays
from mint.trainer.augment import make_crops_batch
from mint.trainer.config import CropConfig


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.04
    seed: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    # one global view; no flips so that stripe orientation stays a cue
    crops: CropConfig = field(default_factory=lambda: CropConfig(n_local=0, n_global=1, flip_prob=0.0))

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("backbone"), dict):
            d["backbone"] = BackboneConfig(**d["backbone"])
        if isinstance(d.get("crops"), dict):
            c = {k: tuple(v) if isinstance(v, list) else v for k, v in d["crops"].items()}
            d["crops"] = CropConfig(**c)
        return cls(**d)


def pretrain_base(samples: list, cfg: PretrainConfig, log_sink=None) -> VisionTransformer:
    """Supervised dominant-type pretraining of a fresh ViT (no ST token)."""
    labels = np.array([s.dominant for s in samples])
    if np.any(labels < 0):
        raise ValueError("pretraining samples need dominant-type labels")
    n_cls = int(labels.max()) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    model = VisionTransformer(cfg.backbone, generator=gen)
    head = torch.nn.Linear(cfg.backbone.embed_dim, n_cls)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.02, generator=gen)
        head.bias.zero_()
    opt = torch.optim.AdamW(list(model.parameters()) + list(head.parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay, foreach=False)
    images = torch.from_numpy(np.stack([s.tile for s in samples])).permute(0, 3, 1, 2).float()
    y = torch.from_numpy(labels).long()
    rng = np.random.default_rng([cfg.seed, 0xBA5E])
    for step in range(cfg.steps):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        x = make_crops_batch(images[idx], cfg.crops, rng).globals[:, 0]
        loss = F.cross_entropy(head(model(x).cls), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_sink is not None and (step + 1) % 100 == 0:
            log_sink(json.dumps({"pretrain_step": step + 1, "loss": round(loss.item(), 6)}))
    model.eval()
    return model.requires_grad_(True)


def save_backbone(path: str | Path, model: VisionTransformer, meta: dict | None = None) -> None:
    arrays = {f"backbone.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    info = {"kind": "backbone", "backbone": model.cfg.to_dict(), **(meta or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
    save_arrays(path, arrays)


def load_backbone(path: str | Path) -> tuple[VisionTransformer, dict]:
    arrays = load_arrays(path)
    meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone file")
    model = VisionTransformer(BackboneConfig(**meta["backbone"]))
    sd = {k[len("backbone.") :]: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(sd, strict=True)
    return model, meta
