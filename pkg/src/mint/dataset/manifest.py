"""On-disk dataset: JSON manifest, gene vocabulary, per-sample payloads."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from mint.dataset.container import ContainerError, load_arrays, save_arrays

MANIFEST_VERSION = 1
Modality = Literal["spot", "xenium"]
_SPOT_KEYS = {"tile", "expr_index", "expr_value", "measured"}
_XENIUM_KEYS = {"tile", "transcript_xy", "transcript_gene", "panel"}


SPLITS = ("train", "eval", "pretrain")


class ManifestError(ValueError):
    """Invalid manifest or payload; message carries the entry index when known."""


@dataclass(frozen=True)
class GeneVocabulary:
    genes: tuple[str, ...]
    xenium_genes: tuple[str, ...]
    # xenium_to_spot[j] = index of Xenium gene j in ``genes``, or -1
    xenium_to_spot: tuple[int, ...] = ()

    def __post_init__(self):
        for name, names in (("genes", self.genes), ("xenium_genes", self.xenium_genes)):
            if len(set(names)) != len(names):
                raise ManifestError(f"vocabulary {name} contains duplicate identifiers")
        if self.xenium_to_spot and len(self.xenium_to_spot) != len(self.xenium_genes):
            raise ManifestError("xenium_to_spot length must match xenium_genes")

    @property
    def G(self) -> int:
        return len(self.genes)

    @property
    def G_xen(self) -> int:
        return len(self.xenium_genes)

    def to_json(self) -> dict:
        return {
            "genes": list(self.genes),
            "xenium_genes": list(self.xenium_genes),
            "xenium_to_spot": list(self.xenium_to_spot),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeneVocabulary":
        return cls(tuple(d["genes"]), tuple(d["xenium_genes"]), tuple(int(i) for i in d.get("xenium_to_spot", ())))

    @classmethod
    def toy(cls, G: int = 64, G_xen: int = 16) -> "GeneVocabulary":
        genes = tuple(f"gene{i:05d}" for i in range(G))
        return cls(genes, genes[:G_xen], tuple(range(G_xen)))


@dataclass
class SpotSample:
    tile: np.ndarray  # (H, W, 3) float32 in [0, 1]
    slide_id: str
    expression: np.ndarray  # (G,) dense log1p-normalized, zero outside measured_mask
    measured_mask: np.ndarray  # (G,) bool
    mixture: np.ndarray | None = None
    dominant: int | None = None
    modality: str = field(default="spot", init=False)

    def to_arrays(self) -> dict[str, np.ndarray]:
        idx = np.flatnonzero(self.expression).astype(np.int64)
        out = {
            "tile": self.tile.astype(np.float32),
            "expr_index": idx,
            "expr_value": self.expression[idx].astype(np.float32),
            "measured": self.measured_mask.astype(bool),
        }
        _add_truth(out, self.mixture, self.dominant)
        return out


@dataclass
class XeniumSample:
    tile: np.ndarray
    slide_id: str
    transcripts: np.ndarray  # (n, 3): x px, y px, gene index into the Xenium vocabulary
    panel_mask: np.ndarray  # (G_xen,) bool
    mixture: np.ndarray | None = None
    dominant: int | None = None
    modality: str = field(default="xenium", init=False)

    def to_arrays(self) -> dict[str, np.ndarray]:
        t = np.asarray(self.transcripts, dtype=np.float64).reshape(-1, 3)
        out = {
            "tile": self.tile.astype(np.float32),
            "transcript_xy": t[:, :2].astype(np.float32),
            "transcript_gene": t[:, 2].astype(np.int32),
            "panel": self.panel_mask.astype(bool),
        }
        _add_truth(out, self.mixture, self.dominant)
        return out


def _add_truth(out: dict, mixture, dominant) -> None:
    if mixture is not None:
        out["mixture"] = np.asarray(mixture, dtype=np.float64)
    if dominant is not None:
        out["dominant"] = np.asarray([dominant], dtype=np.int64)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    modality: Modality
    slide_id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    vocab_path: str
    tile_size: int
    split: Literal["train", "eval", "pretrain"]
    meta: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def load_vocab(self) -> GeneVocabulary:
        return read_vocab(self.resolve(self.vocab_path))

    def load_sample(self, index: int, vocab: GeneVocabulary | None = None):
        e = self.entries[index]
        return read_sample(self.resolve(e.path), e.modality, e.slide_id, vocab or self.load_vocab())

    def load_all(self) -> list:
        vocab = self.load_vocab()
        return [self.load_sample(i, vocab) for i in range(len(self.entries))]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "tile_size": self.tile_size,
            "split": self.split,
            "vocab": self.vocab_path,
            "entries": [{"path": e.path, "modality": e.modality, "slide_id": e.slide_id} for e in self.entries],
            "meta": self.meta,
        }


def write_vocab(path: str | Path, vocab: GeneVocabulary) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), indent=1) + "\n")


def read_vocab(path: str | Path) -> GeneVocabulary:
    try:
        return GeneVocabulary.from_json(json.loads(Path(path).read_text()))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read vocabulary {path}: {exc}") from exc


def write_sample(path: str | Path, sample: SpotSample | XeniumSample) -> None:
    save_arrays(path, sample.to_arrays())


def read_sample(path: str | Path, modality: str, slide_id: str, vocab: GeneVocabulary):
    arrs = load_arrays(path)
    mixture = arrs.get("mixture")
    dominant = int(arrs["dominant"][0]) if "dominant" in arrs else None
    if modality == "spot":
        missing = _SPOT_KEYS - arrs.keys()
        if missing:
            raise ManifestError(f"{path}: not a spot payload (missing {sorted(missing)})")
        measured = arrs["measured"]
        if measured.shape != (vocab.G,):
            raise ManifestError(f"{path}: measured mask length {measured.shape} != vocabulary size {vocab.G}")
        expr = np.zeros(vocab.G, dtype=np.float32)
        idx = arrs["expr_index"]
        if idx.size and (idx.min() < 0 or idx.max() >= vocab.G):
            raise ManifestError(f"{path}: expression index out of vocabulary range")
        expr[idx] = arrs["expr_value"]
        if np.any(expr < 0) or np.any(expr[~measured] != 0):
            raise ManifestError(f"{path}: expression must be non-negative and zero outside measured genes")
        return SpotSample(arrs["tile"], slide_id, expr, measured, mixture, dominant)
    if modality == "xenium":
        missing = _XENIUM_KEYS - arrs.keys()
        if missing:
            raise ManifestError(f"{path}: not a xenium payload (missing {sorted(missing)})")
        panel = arrs["panel"]
        if panel.shape != (vocab.G_xen,):
            raise ManifestError(f"{path}: panel length {panel.shape} != Xenium vocabulary size {vocab.G_xen}")
        xy = arrs["transcript_xy"].astype(np.float64)
        gene = arrs["transcript_gene"].astype(np.int64)
        if gene.size and (gene.min() < 0 or gene.max() >= vocab.G_xen or not panel[gene].all()):
            raise ManifestError(f"{path}: transcript gene outside the sample's panel")
        h, w = arrs["tile"].shape[:2]
        if xy.size and (xy[:, 0].min() < 0 or xy[:, 0].max() >= w or xy[:, 1].min() < 0 or xy[:, 1].max() >= h):
            raise ManifestError(f"{path}: transcript coordinates outside the tile")
        transcripts = np.concatenate([xy, gene[:, None].astype(np.float64)], axis=1)
        return XeniumSample(arrs["tile"], slide_id, transcripts, panel, mixture, dominant)
    raise ManifestError(f"unknown modality {modality!r}")


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path, validate_payloads: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    With ``validate_payloads`` every sample file is opened and checked
    against its declared modality, the vocabulary and the tile size.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON: {exc}") from exc
    for key in ("version", "tile_size", "split", "vocab", "entries"):
        if key not in raw:
            raise ManifestError(f"{path}: missing field {key!r}")
    if raw["version"] != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {raw['version']}")
    if raw["split"] not in SPLITS:
        raise ManifestError(f"{path}: split must be one of {SPLITS}")
    tile_size = int(raw["tile_size"])
    entries = []
    for i, e in enumerate(raw["entries"]):
        if not isinstance(e, dict) or not {"path", "modality", "slide_id"} <= e.keys():
            raise ManifestError(f"entry {i}: malformed entry {e!r}")
        if e["modality"] not in ("spot", "xenium"):
            raise ManifestError(f"entry {i}: unknown modality {e['modality']!r}")
        entries.append(ManifestEntry(str(e["path"]), e["modality"], str(e["slide_id"])))
    manifest = DatasetManifest(
        entries=entries,
        vocab_path=str(raw["vocab"]),
        tile_size=tile_size,
        split=raw["split"],
        meta=raw.get("meta", {}),
        version=raw["version"],
        root=path.parent.resolve(),
    )
    vocab_file = manifest.resolve(manifest.vocab_path)
    if not vocab_file.is_file():
        raise ManifestError(f"{path}: vocabulary file not found: {vocab_file}")
    vocab = manifest.load_vocab()
    for i, e in enumerate(entries):
        p = manifest.resolve(e.path)
        if not p.is_file():
            raise ManifestError(f"entry {i}: sample file not found: {p}")
        if not validate_payloads:
            continue
        try:
            s = read_sample(p, e.modality, e.slide_id, vocab)
        except (ManifestError, ContainerError) as exc:
            raise ManifestError(f"entry {i}: {exc}") from exc
        if s.tile.shape[:2] != (tile_size, tile_size):
            raise ManifestError(f"entry {i}: tile shape {s.tile.shape} does not match tile_size {tile_size}")
    return manifest


def build_manifest(
    root: str | Path,
    samples: Iterable[SpotSample | XeniumSample],
    vocab: GeneVocabulary,
    tile_size: int,
    split: str,
    meta: dict | None = None,
) -> DatasetManifest:
    """Write samples + vocabulary under ``root`` and return the manifest (also written)."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    write_vocab(root / "vocab.json", vocab)
    entries = []
    for i, s in enumerate(samples):
        rel = f"samples/{s.modality}_{i:06d}.mnta"
        write_sample(root / rel, s)
        entries.append(ManifestEntry(rel, s.modality, s.slide_id))
    m = DatasetManifest(entries, "vocab.json", tile_size, split, meta or {}, root=root.resolve())
    write_manifest(root / "manifest.json", m)
    return m
