"""Representation variants, PCA+Ridge expression benchmark, morphology probe, ordering verdicts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from mint.dataset.expression import compute_hvg

VARIANTS = ("cls", "st", "sum", "concat")


@dataclass
class FeatureRecord:
    sample_id: str
    z_cls: np.ndarray
    z_st: np.ndarray | None


def representation_variant(record: FeatureRecord, variant: str) -> np.ndarray:
    if variant == "cls":
        return record.z_cls
    if variant not in VARIANTS:
        raise ValueError(f"unknown representation variant {variant!r}")
    if record.z_st is None:
        raise ValueError(f"variant {variant!r} needs an ST token")
    if variant == "st":
        return record.z_st
    if variant == "sum":
        return record.z_cls + record.z_st
    return np.concatenate([record.z_cls, record.z_st])


def variant_matrix(records: list[FeatureRecord], variant: str) -> np.ndarray:
    return np.stack([representation_variant(r, variant) for r in records]).astype(np.float64)


@torch.no_grad()
def extract_features(backbone, manifest, samples=None, batch_size: int = 256, mask_st: bool = False) -> list[FeatureRecord]:
    """Encode every full tile of ``manifest`` (no augmentation), sorted by sample id.

    Pass the teacher backbone instead of the student to switch encoders.
    ``mask_st`` must match how the checkpoint was trained (CLS ablations).
    """
    samples = samples if samples is not None else manifest.load_all()
    if len(samples) != len(manifest.entries):
        raise ValueError("sample count does not match manifest")
    ids = [e.path for e in manifest.entries]
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    dtype = next(backbone.parameters()).dtype
    records = []
    was_training = backbone.training
    backbone.eval()
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x = torch.from_numpy(np.stack([samples[i].tile for i in idx])).permute(0, 3, 1, 2).to(dtype)
        with torch.no_grad():
            out = backbone(x, mask_st=mask_st) if mask_st else backbone(x)
        for j, i in enumerate(idx):
            st = out.st[j].double().numpy() if out.st is not None else None
            records.append(FeatureRecord(ids[i], out.cls[j].double().numpy(), st))
    backbone.train(was_training)
    return records


def save_features(path: str | Path, records: list[FeatureRecord], variant: str | None = None, meta: dict | None = None) -> None:
    from mint.dataset.container import save_arrays

    arrays = {"sample_ids": np.frombuffer("\n".join(r.sample_id for r in records).encode(), dtype=np.uint8)}
    if meta is not None:
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    arrays["z_cls"] = np.stack([r.z_cls for r in records])
    if records and records[0].z_st is not None:
        arrays["z_st"] = np.stack([r.z_st for r in records])
    if variant is not None:
        arrays[f"variant_{variant}"] = variant_matrix(records, variant)
    save_arrays(path, arrays)


def load_features(path: str | Path) -> list[FeatureRecord]:
    from mint.dataset.container import load_arrays

    a = load_arrays(path)
    ids = bytes(a["sample_ids"]).decode().split("\n") if a["sample_ids"].size else []
    st = a.get("z_st")
    return [FeatureRecord(i, a["z_cls"][k], None if st is None else st[k]) for k, i in enumerate(ids)]


def features_meta(path: str | Path) -> dict:
    from mint.dataset.container import load_arrays

    a = load_arrays(path)
    return json.loads(bytes(a["__meta__"]).decode()) if "__meta__" in a else {}


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, F)
    explained_variance: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit_transform(X, n_components: int) -> tuple[np.ndarray, PCAModel]:
    """Centered SVD projection; each component's largest-magnitude loading is positive."""
    X = np.asarray(X, dtype=np.float64)
    s, f = X.shape
    if n_components > min(s, f) or n_components < 1:
        raise ValueError(f"n_components={n_components} must lie in [1, min(S, F)={min(s, f)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        comps = np.eye(n_components, f)
        return np.zeros((s, n_components)), PCAModel(mean, comps, np.zeros(n_components))
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:n_components].copy()
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(n_components), pivot])[:, None]
    model = PCAModel(mean, comps, sv[:n_components] ** 2 / max(s - 1, 1))
    return Xc @ comps.T, model


def ridge_fit_predict(X_train, Y_train, X_test, alpha: float) -> np.ndarray:
    """Multi-output ridge with intercept; solves ``(Xc'Xc + alpha I) W = Xc'Yc``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    X = np.asarray(X_train, dtype=np.float64)
    Y = np.asarray(Y_train, dtype=np.float64)
    Xt = np.asarray(X_test, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0] or X.shape[1] != Xt.shape[1]:
        raise ValueError("inconsistent ridge shapes")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    try:
        W = np.linalg.solve(A, Xc.T @ Yc)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular ridge system (alpha=0 with rank-deficient X)") from exc
    return (Xt - xm) @ W + ym


def pearson(x, y) -> tuple[float, bool]:
    """Sample Pearson r and a degenerate flag; constant input returns ``(0.0, True)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        return 0.0, True
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0)), False


@dataclass
class Protocol:
    n_pca: int = 256
    alpha: float = 1.0
    n_eval_hvg: int = 50
    test_fraction: float = 0.5
    seed: int = 0
    alpha_grid: tuple[float, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        d = dict(d)
        if "alpha_grid" in d:
            d["alpha_grid"] = tuple(d["alpha_grid"])
        return cls(**d)


@dataclass
class EvalReport:
    per_gene_pearson: list[float]
    genes: list[int]
    degenerate_genes: list[int]
    mean_pearson: float
    n_pca: int
    alpha: float
    variant: str = ""
    probe_accuracy: float | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test < 2 or n - n_test < 2:
        raise ValueError(f"degenerate split of {n} samples with test fraction {test_fraction}")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _pca_ridge_scores(Ftr, Ytr, Fte, Yte, n_pca, alpha):
    n_pca = min(n_pca, Ftr.shape[0] - 1, Ftr.shape[1])
    Ztr, pca = pca_fit_transform(Ftr, n_pca)
    pred = ridge_fit_predict(Ztr, Ytr, pca.transform(Fte), alpha)
    rs, flags = zip(*(pearson(pred[:, j], Yte[:, j]) for j in range(Yte.shape[1])))
    return np.array(rs), np.array(flags), n_pca


def benchmark_expression(features, expressions, protocol: Protocol | None = None, measured=None, variant: str = "") -> EvalReport:
    """PCA on train features, ridge to the train-split top HVGs, Pearson per gene on test."""
    p = protocol or Protocol()
    F_ = np.asarray(features, dtype=np.float64)
    Y = np.asarray(expressions, dtype=np.float64)
    if F_.shape[0] != Y.shape[0]:
        raise ValueError("features and expressions differ in sample count")
    tr, te = split_indices(F_.shape[0], p.test_fraction, p.seed)
    mask = np.ones(Y.shape[1], dtype=bool) if measured is None else np.asarray(measured, dtype=bool)
    genes = compute_hvg(Y[tr], mask, min(p.n_eval_hvg, int(mask.sum())))
    Ytr, Yte = Y[tr][:, genes], Y[te][:, genes]
    alpha = p.alpha
    if p.alpha_grid:
        # inner validation fold carved out of the training split
        itr, iva = split_indices(len(tr), 0.25, p.seed + 1)
        best = None
        for a in p.alpha_grid:
            rs, _, _ = _pca_ridge_scores(F_[tr][itr], Ytr[itr], F_[tr][iva], Ytr[iva], p.n_pca, a)
            if best is None or rs.mean() > best[0]:
                best = (rs.mean(), a)
        alpha = best[1]
    rs, flags, n_pca = _pca_ridge_scores(F_[tr], Ytr, F_[te], Yte, p.n_pca, alpha)
    return EvalReport(
        per_gene_pearson=[float(r) for r in rs],
        genes=[int(g) for g in genes],
        degenerate_genes=[int(g) for g, f in zip(genes, flags) if f],
        mean_pearson=float(np.mean(rs)),
        n_pca=int(n_pca),
        alpha=float(alpha),
        variant=variant,
        config=asdict(p),
    )


def morphology_probe(features, labels, protocol: Protocol | None = None, C: float = 1.0) -> float:
    """Balanced accuracy of a multinomial logistic probe on standardized frozen features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import balanced_accuracy_score

    p = protocol or Protocol()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    tr, te = split_indices(len(y), p.test_fraction, p.seed)
    if np.unique(y[tr]).size < 2:
        raise ValueError("probe training split has a single class")
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    clf = LogisticRegression(C=C, max_iter=5000, tol=1e-8)
    clf.fit((X[tr] - mu) / sd, y[tr])
    return float(balanced_accuracy_score(y[te], clf.predict((X[te] - mu) / sd)))


@dataclass
class VariantScores:
    hest: float
    probe: float


def ordering_report(
    variants: dict[str, VariantScores],
    frozen: VariantScores | None = None,
    ablation_no_distill: VariantScores | None = None,
    ablation_distill: VariantScores | None = None,
    approx_tol: float = 0.01,
    concat_tol: float = 0.0,
    min_drop: float = 0.0,
) -> dict:
    """Boolean verdicts for the representation-ordering claims, with the margins behind them.

    Args:
        variants: MINT scores keyed by ``cls``/``st``/``sum``/``concat``.
        frozen: CLS-only scores of the untouched pretrained encoder.
        ablation_no_distill / ablation_distill: CLS-only scores of the
            expression-on-CLS ablations without / with the anchor.
    """
    missing = set(VARIANTS) - variants.keys()
    if missing:
        raise ValueError(f"missing variants {sorted(missing)}")
    v = variants
    others = [v[k].hest for k in ("cls", "st", "sum")]
    out: dict = {
        "specialization": {
            "verdict": v["st"].hest > v["cls"].hest and v["cls"].probe > v["st"].probe,
            "hest_margin_st_minus_cls": v["st"].hest - v["cls"].hest,
            "probe_margin_cls_minus_st": v["cls"].probe - v["st"].probe,
        },
        "sum_beats_cls": {"verdict": v["sum"].hest > v["cls"].hest, "margin": v["sum"].hest - v["cls"].hest},
        "concat_best": {
            "verdict": v["concat"].hest >= max(others) - concat_tol,
            "margin": v["concat"].hest - max(others),
            "tolerance": concat_tol,
        },
    }
    if frozen is not None:
        gap = v["cls"].probe - frozen.probe
        out["cls_matches_frozen"] = {"verdict": abs(gap) <= approx_tol, "probe_gap": gap, "tolerance": approx_tol}
    if frozen is not None and ablation_no_distill is not None and ablation_distill is not None:
        drop = frozen.probe - ablation_no_distill.probe
        recovered = ablation_distill.probe - ablation_no_distill.probe
        out["forgetting"] = {
            "verdict": drop > 0 and drop >= min_drop and recovered >= 0.5 * drop,
            "drop_without_distill": drop,
            "recovered_with_distill": recovered,
            "min_drop": min_drop,
        }
    out["all_true"] = all(d["verdict"] for d in out.values() if isinstance(d, dict))
    return out


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
