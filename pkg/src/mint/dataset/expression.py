"""Expression preprocessing and highly-variable-gene machinery."""

from __future__ import annotations

import numpy as np

DEFAULT_TARGET_SUM = 1e4


def normalize_expression(raw_counts, target_sum: float = DEFAULT_TARGET_SUM) -> np.ndarray:
    """Library-size normalize counts to ``target_sum`` and apply log1p.

    An all-zero vector maps to all zeros.

    Raises:
        ValueError: on negative counts or a non-positive ``target_sum``.
    """
    c = np.asarray(raw_counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("raw counts must be non-negative")
    if target_sum <= 0:
        raise ValueError(f"target_sum must be positive, got {target_sum}")
    total = c.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    return np.log1p(target_sum * c / safe)


def gene_variances(expression_matrix) -> np.ndarray:
    """Per-gene sample variance (ddof=1), independent of row order.

    Columns are sorted before reduction so permuting rows gives bit-identical
    variances, which keeps tie-breaking among equal-variance genes stable.
    """
    x = np.sort(np.asarray(expression_matrix, dtype=np.float64), axis=0)
    return x.var(axis=0, ddof=1)


def compute_hvg(expression_matrix, measured_mask, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-variance measured genes.

    Ordered by descending variance; ties go to the lower gene index.
    """
    x = np.asarray(expression_matrix, dtype=np.float64)
    mask = np.asarray(measured_mask, dtype=bool)
    if x.ndim != 2 or x.shape[1] != mask.shape[0]:
        raise ValueError(f"matrix shape {x.shape} does not match mask length {mask.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("compute_hvg needs at least 2 samples")
    measured = np.flatnonzero(mask)
    if k < 0 or k > measured.size:
        raise ValueError(f"k={k} exceeds number of measured genes ({measured.size})")
    var = gene_variances(x[:, measured])
    order = np.lexsort((measured, -var))
    return measured[order[:k]].astype(np.int64)


def hvg_coin(p_hvg: float, rng: np.random.Generator) -> bool:
    """True (use the HVG subset) with probability ``p_hvg``; one uniform draw."""
    if not 0.0 <= p_hvg <= 1.0:
        raise ValueError(f"p_hvg must lie in [0, 1], got {p_hvg}")
    return bool(rng.random() < p_hvg)


def select_genes_stochastic(measured, hvg, p_hvg: float, rng: np.random.Generator) -> np.ndarray:
    """Pick the HVG subset with probability ``p_hvg``, else every measured gene.

    Consumes exactly one uniform draw from ``rng``.
    """
    measured = np.unique(np.asarray(measured, dtype=np.int64))
    hvg = np.asarray(hvg, dtype=np.int64)
    if not 0.0 <= p_hvg <= 1.0:
        raise ValueError(f"p_hvg must lie in [0, 1], got {p_hvg}")
    if not np.isin(hvg, measured).all():
        raise ValueError("hvg indices must be a subset of the measured genes")
    if hvg_coin(p_hvg, rng):
        return np.sort(hvg)
    return measured
