"""Synthetic paired histology/transcriptomics with a known morphology-to-expression map.

Each tile is a Voronoi partition into cell-type regions. A cell type has a
base colour and an oriented stripe texture; spot expression is a Poisson
draw around the area-weighted mixture of per-type signatures, and Xenium
transcripts are scattered inside each region with gene frequencies taken
from that region's type.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mint.dataset.expression import normalize_expression
from mint.dataset.manifest import DatasetManifest, GeneVocabulary, SpotSample, XeniumSample, build_manifest


@dataclass
class SynthConfig:
    n_celltypes: int = 4
    # rank of the molecular program space; n_celltypes > latent_dim makes
    # some visually distinct types molecularly redundant
    latent_dim: int = 4
    tile_size: int = 64
    patch_size: int = 16
    G: int = 64
    G_xen: int = 16
    library_size: float = 2000.0
    transcript_rate: float = 30.0
    noise_std: float = 0.05
    color_spread: float = 0.12
    # colour follows the molecular program (type % latent_dim) so that
    # molecularly redundant types differ only in texture
    color_by_program: bool = False
    # lightness offset separating types that share a colour (+/- per subtype)
    subtype_lightness: float = 0.0
    # per-region cell state z ~ U(0, 1): scales a gene program by
    # exp(state_strength * (z - 0.5)) and the stripe contrast by
    # (1 + state_texture * (z - 0.5)); both 0 disables the state
    state_strength: float = 0.0
    state_texture: float = 0.0
    state_genes: int = 16
    stripe_amplitude: float = 0.15
    stripe_period: float = 6.0
    min_regions: int = 2
    max_regions: int = 6
    measured_fraction: float = 0.8
    panel_fraction: float = 0.75
    target_sum: float = 1e4
    seed: int = 0
    signature_matrix: np.ndarray | None = field(default=None, repr=False)
    xenium_signature: np.ndarray | None = field(default=None, repr=False)
    colors: np.ndarray | None = field(default=None, repr=False)
    state_program: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_celltypes < 1 or self.latent_dim < 1:
            raise ValueError("n_celltypes and latent_dim must be >= 1")
        if self.tile_size % self.patch_size:
            raise ValueError("tile_size must be divisible by patch_size")
        if self.G_xen > self.G:
            raise ValueError("Xenium panel vocabulary must be a subset of the spot vocabulary")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError("need 1 <= min_regions <= max_regions")
        rng = np.random.default_rng([self.seed, 0xC0FFEE])
        if self.signature_matrix is None:
            self.signature_matrix = default_signatures(self.n_celltypes, self.latent_dim, self.G, self.library_size, rng)
        self.signature_matrix = np.asarray(self.signature_matrix, dtype=np.float64)
        if self.signature_matrix.shape != (self.n_celltypes, self.G) or np.any(self.signature_matrix < 0):
            raise ValueError("signature_matrix must be non-negative with shape (n_celltypes, G)")
        if self.xenium_signature is None:
            self.xenium_signature = self.signature_matrix[:, : self.G_xen].copy()
        self.xenium_signature = np.asarray(self.xenium_signature, dtype=np.float64)
        if self.xenium_signature.shape != (self.n_celltypes, self.G_xen) or np.any(self.xenium_signature < 0):
            raise ValueError("xenium_signature must be non-negative with shape (n_celltypes, G_xen)")
        if self.colors is None:
            if self.color_by_program:
                self.colors = default_colors(self.latent_dim, self.color_spread)[np.arange(self.n_celltypes) % self.latent_dim]
                sub = np.arange(self.n_celltypes) // self.latent_dim
                self.colors = self.colors + self.subtype_lightness * np.where(sub % 2 == 0, -1.0, 1.0)[:, None]
            else:
                self.colors = default_colors(self.n_celltypes, self.color_spread)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(self.n_celltypes, 3)
        if self.state_program is None:
            prog = np.zeros(self.G, dtype=bool)
            prog[rng.choice(self.G, size=min(self.state_genes, self.G), replace=False)] = True
            self.state_program = prog
        self.state_program = np.asarray(self.state_program, dtype=bool).reshape(self.G)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("signature_matrix", "xenium_signature", "colors", "state_program"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def default_signatures(n_types: int, latent_dim: int, G: int, library_size: float, rng) -> np.ndarray:
    """Per-type mean counts: a shared baseline plus type loadings on sparse gene programs."""
    programs = np.zeros((latent_dim, G))
    for l in range(latent_dim):
        support = rng.choice(G, size=max(2, G // (latent_dim + 1)), replace=False)
        programs[l, support] = rng.gamma(2.0, 1.0, size=support.size)
    if latent_dim >= n_types:
        loadings = np.eye(n_types, latent_dim)
    else:
        loadings = np.zeros((n_types, latent_dim))
        loadings[np.arange(n_types), np.arange(n_types) % latent_dim] = 1.0
    baseline = rng.gamma(2.0, 0.15, size=G)
    sig = baseline[None, :] + loadings @ programs
    return library_size * sig / sig.sum(axis=1, keepdims=True)


def default_colors(n_types: int, spread: float) -> np.ndarray:
    """Evenly spaced hues on a small circle around mid-gray."""
    ang = 2 * np.pi * np.arange(n_types) / max(n_types, 1)
    basis = np.array([[1.0, -0.5, -0.5], [0.0, np.sqrt(3) / 2, -np.sqrt(3) / 2]])
    return 0.5 + spread * (np.cos(ang)[:, None] * basis[0] + np.sin(ang)[:, None] * basis[1])


@dataclass
class SynthTileTruth:
    region_map: np.ndarray  # (H, W) int cell-type labels
    dominant_type: int
    mixture_weights: np.ndarray  # (n_celltypes,) area fractions
    region_types: np.ndarray | None = None  # (n_regions,)
    region_state: np.ndarray | None = None  # (n_regions,) cell state in [0, 1]
    region_area: np.ndarray | None = None  # (n_regions,) area fractions


def _stable_int(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


def tile_rng(cfg: SynthConfig, slide_id: str, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _stable_int(slide_id), index])


def render_tile(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, SynthTileTruth, np.ndarray]:
    """Draw one Voronoi tile. Returns ``(tile, truth, region_ids)``."""
    s = cfg.tile_size
    n_reg = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    seeds = rng.uniform(-0.1 * s, 1.1 * s, size=(n_reg, 2))
    types = rng.integers(0, cfg.n_celltypes, size=n_reg)
    phases = rng.uniform(0, 2 * np.pi, size=n_reg)
    state = rng.uniform(0.0, 1.0, size=n_reg)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    d2 = (xx[None] - seeds[:, 0, None, None]) ** 2 + (yy[None] - seeds[:, 1, None, None]) ** 2
    region = d2.argmin(axis=0)
    type_map = types[region]
    angles = np.pi * type_map / cfg.n_celltypes
    stripe = np.sin(2 * np.pi * (xx * np.cos(angles) + yy * np.sin(angles)) / cfg.stripe_period + phases[region])
    amp = cfg.stripe_amplitude * (1 + cfg.state_texture * (state[region] - 0.5))
    tile = cfg.colors[type_map] + (amp * stripe)[..., None]
    tile = tile + rng.normal(0.0, cfg.noise_std, size=tile.shape)
    tile = np.clip(tile, 0.0, 1.0).astype(np.float32)
    weights = np.bincount(type_map.ravel(), minlength=cfg.n_celltypes) / type_map.size
    area = np.bincount(region.ravel(), minlength=n_reg) / region.size
    truth = SynthTileTruth(type_map, int(np.argmax(weights)), weights, types, state, area)
    return tile, truth, region


def region_rates(cfg: SynthConfig, cell_type: int, state: float) -> np.ndarray:
    """Expected counts of one cell type at a given cell state (full ``G`` vector)."""
    gain = np.exp(cfg.state_strength * (state - 0.5) * cfg.state_program)
    return cfg.signature_matrix[cell_type] * gain


def oracle_expression(truth: SynthTileTruth, cfg: SynthConfig) -> np.ndarray:
    """Noiseless area-weighted mixture of per-region rates (expected counts).

    Without a cell state this is ``sum_t w_t * signature[t]``.
    """
    if cfg.state_strength == 0 or truth.region_types is None:
        return np.asarray(truth.mixture_weights, dtype=np.float64) @ cfg.signature_matrix
    out = np.zeros(cfg.G)
    for t, z, a in zip(truth.region_types, truth.region_state, truth.region_area):
        out += a * region_rates(cfg, int(t), float(z))
    return out


def _sample_transcripts(cfg, rng, truth: SynthTileTruth, region: np.ndarray, panel: np.ndarray) -> np.ndarray:
    rows = []
    panel_idx = np.flatnonzero(panel)
    for r in np.unique(region):
        pix = np.flatnonzero(region.ravel() == r)
        t = int(truth.region_map.ravel()[pix[0]])
        n = rng.poisson(cfg.transcript_rate)
        if n == 0:
            continue
        freq = cfg.xenium_signature[t, panel_idx]
        if cfg.state_strength != 0 and truth.region_state is not None:
            freq = freq * np.exp(cfg.state_strength * (truth.region_state[r] - 0.5) * cfg.state_program[: cfg.G_xen][panel_idx])
        genes = panel_idx[rng.choice(panel_idx.size, size=n, p=freq / freq.sum())]
        at = rng.choice(pix, size=n)
        # pixel-centre coordinates: pixel i spans [i - 0.5, i + 0.5)
        x = at % cfg.tile_size + rng.uniform(-0.5, 0.5, size=n)
        y = at // cfg.tile_size + rng.uniform(-0.5, 0.5, size=n)
        rows.append(np.stack([x, y, genes.astype(np.float64)], axis=1))
    if not rows:
        return np.zeros((0, 3))
    out = np.concatenate(rows)
    # keep float32 storage safely inside the tile
    np.clip(out[:, :2], 0.0, np.nextafter(np.float32(cfg.tile_size), np.float32(0)), out=out[:, :2])
    return out


def slide_masks(cfg: SynthConfig, slide_id: str, modality: str, full: bool = False) -> np.ndarray:
    """Measured-gene mask (spot) or panel mask (xenium) for a slide."""
    rng = np.random.default_rng([cfg.seed, _stable_int(slide_id), 0xFFFF])
    n = cfg.G if modality == "spot" else cfg.G_xen
    frac = cfg.measured_fraction if modality == "spot" else cfg.panel_fraction
    if full or frac >= 1.0:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=max(1, int(round(frac * n))), replace=False)] = True
    return mask


def generate_slide(cfg: SynthConfig, n_spots: int, modality: str, slide_id: str = "slide0", full_panel: bool = False):
    """Generate ``n_spots`` samples of one slide plus their ground truth.

    Every tile draws from its own generator keyed by ``(seed, slide_id,
    index)``, so any subset can be regenerated independently.
    """
    if modality not in ("spot", "xenium"):
        raise ValueError(f"unknown modality {modality!r}")
    mask = slide_masks(cfg, slide_id, modality, full=full_panel)
    samples, truths = [], []
    for i in range(n_spots):
        rng = tile_rng(cfg, slide_id, i)
        tile, truth, region = render_tile(cfg, rng)
        if modality == "spot":
            rate = oracle_expression(truth, cfg)
            counts = rng.poisson(rate) * mask
            expr = normalize_expression(counts, cfg.target_sum).astype(np.float32)
            samples.append(SpotSample(tile, slide_id, expr, mask.copy(), truth.mixture_weights, truth.dominant_type))
        else:
            tr = _sample_transcripts(cfg, rng, truth, region, mask)
            samples.append(XeniumSample(tile, slide_id, tr, mask.copy(), truth.mixture_weights, truth.dominant_type))
        truths.append(truth)
    return samples, truths


@dataclass
class DatasetLayout:
    train_spot_slides: int = 8
    spots_per_slide: int = 150
    train_xenium_slides: int = 2
    xenium_per_slide: int = 60
    eval_slides: int = 4
    eval_spots_per_slide: int = 500
    # base-encoder pretraining tiles (disjoint slides); 0 disables the split
    pretrain_slides: int = 4
    pretrain_spots_per_slide: int = 250

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetLayout":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown layout keys: {sorted(unknown)}")
        return cls(**d)


def generate_dataset(cfg: SynthConfig, out_dir: str | Path, layout: DatasetLayout | None = None) -> dict[str, DatasetManifest]:
    """Write ``out_dir/{train,eval,pretrain}`` datasets; returns the manifests by split.

    Eval slides measure every gene so the evaluation gene set is shared.
    """
    layout = layout or DatasetLayout()
    out_dir = Path(out_dir)
    vocab = GeneVocabulary.toy(cfg.G, cfg.G_xen)
    meta = {"synth": cfg.to_dict(), "layout": asdict(layout), "xenium_to_spot": list(vocab.xenium_to_spot)}
    train = []
    for s in range(layout.train_spot_slides):
        train += generate_slide(cfg, layout.spots_per_slide, "spot", f"train_spot_{s}")[0]
    for s in range(layout.train_xenium_slides):
        train += generate_slide(cfg, layout.xenium_per_slide, "xenium", f"train_xen_{s}")[0]
    ev = []
    for s in range(layout.eval_slides):
        ev += generate_slide(cfg, layout.eval_spots_per_slide, "spot", f"eval_spot_{s}", full_panel=True)[0]
    out = {
        "train": build_manifest(out_dir / "train", train, vocab, cfg.tile_size, "train", meta),
        "eval": build_manifest(out_dir / "eval", ev, vocab, cfg.tile_size, "eval", meta),
    }
    if layout.pretrain_slides:
        pre = []
        for s in range(layout.pretrain_slides):
            pre += generate_slide(cfg, layout.pretrain_spots_per_slide, "spot", f"pretrain_spot_{s}", full_panel=True)[0]
        out["pretrain"] = build_manifest(out_dir / "pretrain", pre, vocab, cfg.tile_size, "pretrain", meta)
    return out
