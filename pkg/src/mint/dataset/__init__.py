from mint.dataset.container import ContainerError, load_arrays, save_arrays
from mint.dataset.expression import compute_hvg, hvg_coin, normalize_expression, select_genes_stochastic
from mint.dataset.geometry import (
    CropGeometry,
    PatchTargetGrid,
    apply_geometry_to_points,
    bin_transcripts_to_patches,
    transform_transcripts,
)
from mint.dataset.manifest import (
    DatasetManifest,
    GeneVocabulary,
    ManifestEntry,
    ManifestError,
    SpotSample,
    XeniumSample,
    build_manifest,
    load_manifest,
    write_manifest,
)

__all__ = [
    "ContainerError",
    "CropGeometry",
    "DatasetManifest",
    "GeneVocabulary",
    "ManifestEntry",
    "ManifestError",
    "PatchTargetGrid",
    "SpotSample",
    "XeniumSample",
    "apply_geometry_to_points",
    "bin_transcripts_to_patches",
    "build_manifest",
    "compute_hvg",
    "load_arrays",
    "load_manifest",
    "normalize_expression",
    "save_arrays",
    "hvg_coin",
    "select_genes_stochastic",
    "transform_transcripts",
    "write_manifest",
]
