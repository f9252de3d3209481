"""PCA, ridge, Pearson, benchmark and probe against closed-form oracles."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mint.dataset.expression import normalize_expression
from mint.backbone import BackboneConfig, VisionTransformer, extend_with_st_token
from mint.evaluation import (
    FeatureRecord,
    Protocol,
    VariantScores,
    benchmark_expression,
    extract_features,
    load_features,
    morphology_probe,
    ordering_report,
    pca_fit_transform,
    pearson,
    representation_variant,
    ridge_fit_predict,
    save_features,
)
from mint.synthgen import SynthConfig, generate_slide, oracle_expression


def ridge_oracle(X, Y, Xt, alpha):
    xm, ym = X.mean(0), Y.mean(0)
    Xc = X - xm
    W = np.linalg.inv(Xc.T @ Xc + alpha * np.eye(X.shape[1])) @ Xc.T @ (Y - ym)
    return (Xt - xm) @ W + ym


class TestVariants:
    def test_shapes_and_sum(self, rng):
        r = FeatureRecord("a", rng.normal(size=8), rng.normal(size=8))
        assert representation_variant(r, "concat").shape == (16,)
        assert representation_variant(r, "sum").shape == (8,)
        np.testing.assert_array_equal(representation_variant(r, "sum"), r.z_cls + r.z_st)
        zero = FeatureRecord("b", r.z_cls, np.zeros(8))
        np.testing.assert_array_equal(representation_variant(zero, "sum"), representation_variant(zero, "cls"))

    def test_reference_concat_dim(self):
        r = FeatureRecord("a", np.zeros(1536), np.zeros(1536))
        assert representation_variant(r, "concat").shape == (3072,)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="unknown"):
            representation_variant(FeatureRecord("a", np.zeros(2), np.zeros(2)), "max")
        with pytest.raises(ValueError, match="ST token"):
            representation_variant(FeatureRecord("a", np.zeros(2), None), "st")


class TestPCA:
    def test_two_points(self):
        Z, m = pca_fit_transform([[1.0, 2.0], [-1.0, -2.0]], 1)
        d = np.array([1.0, 2.0]) / np.sqrt(5)
        np.testing.assert_allclose(m.components[0], d, atol=1e-12)
        np.testing.assert_allclose(Z[:, 0], [np.sqrt(5), -np.sqrt(5)], atol=1e-12)

    def test_full_rank_reconstruction(self, rng):
        X = rng.normal(size=(6, 3)) @ rng.normal(size=(3, 10))
        Z, m = pca_fit_transform(X, 3)
        np.testing.assert_allclose(Z @ m.components + m.mean, X, atol=1e-8)

    def test_covariance_eigen_oracle(self, rng):
        for _ in range(20):
            X = rng.normal(size=(20, 8)) * rng.uniform(0.5, 3, size=8)
            Z, m = pca_fit_transform(X, 3)
            evals, evecs = np.linalg.eigh(np.cov(X, rowvar=False))
            order = np.argsort(evals)[::-1][:3]
            np.testing.assert_allclose(m.explained_variance, evals[order], rtol=1e-8)
            for k, j in enumerate(order):
                v = evecs[:, j] * np.sign(evecs[np.abs(evecs[:, j]).argmax(), j])
                np.testing.assert_allclose(m.components[k], v, atol=1e-8)
            assert np.all(np.abs(Z.mean(0)) < 1e-9)
            ev = m.explained_variance
            assert np.all(np.diff(ev) <= 0)

    def test_sign_convention(self, rng):
        _, m = pca_fit_transform(rng.normal(size=(30, 6)), 4)
        for c in m.components:
            assert c[np.abs(c).argmax()] > 0

    def test_identical_rows(self):
        Z, _ = pca_fit_transform(np.ones((5, 3)), 2)
        assert np.all(Z == 0)

    def test_too_many_components(self, rng):
        with pytest.raises(ValueError):
            pca_fit_transform(rng.normal(size=(4, 3)), 4)


class TestRidge:
    def test_exact_line(self):
        np.testing.assert_allclose(ridge_fit_predict([[1.0], [2.0]], [[1.0], [2.0]], [[3.0]], 0.0), [[3.0]])

    def test_one_d_shrinkage(self):
        pred = ridge_fit_predict([[-0.5], [0.5]], [[-0.5], [0.5]], [[1.0]], 0.5)
        np.testing.assert_allclose(pred, [[0.5]])

    def test_matches_inverse_oracle(self, rng):
        for _ in range(20):
            X, Y, Xt = rng.normal(size=(30, 5)), rng.normal(size=(30, 3)), rng.normal(size=(7, 5))
            a = rng.uniform(0, 10)
            np.testing.assert_allclose(ridge_fit_predict(X, Y, Xt, a), ridge_oracle(X, Y, Xt, a), rtol=1e-8, atol=1e-12)

    def test_least_squares_residual_orthogonal(self, rng):
        X, Y = rng.normal(size=(40, 4)), rng.normal(size=(40, 2))
        R = Y - ridge_fit_predict(X, Y, X, 0.0)
        Xc = X - X.mean(0)
        np.testing.assert_allclose(Xc.T @ R, 0, atol=1e-8)
        np.testing.assert_allclose(R.sum(0), 0, atol=1e-8)

    def test_singular(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(np.linalg.LinAlgError):
            ridge_fit_predict(X, np.ones((3, 1)), X, 0.0)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            ridge_fit_predict([[1.0]], [[1.0]], [[1.0]], -1.0)


class TestPearson:
    def test_examples(self):
        np.testing.assert_allclose(pearson([1, 2, 3], [2, 4, 6])[0], 1.0, atol=1e-15)
        np.testing.assert_allclose(pearson([1, 2, 3], [3, 2, 1])[0], -1.0, atol=1e-15)
        assert pearson([1, 2, 3], [5, 5, 5]) == (0.0, True)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.1, 10), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
    def test_affine_invariance(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=20), r.normal(size=20)
        base = pearson(x, y)[0]
        np.testing.assert_allclose(pearson(a * x + b, y)[0], base, atol=1e-12)
        np.testing.assert_allclose(pearson(-a * x + b, y)[0], -base, atol=1e-12)

    def test_matches_numpy(self, rng):
        x, y = rng.normal(size=50), rng.normal(size=50)
        np.testing.assert_allclose(pearson(x, y)[0], np.corrcoef(x, y)[0, 1], atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [1])


@pytest.fixture(scope="module")
def synthetic():
    cfg = SynthConfig(tile_size=32, patch_size=8, G=32, G_xen=8)
    samples, truths = generate_slide(cfg, 400, "spot", "ev", full_panel=True)
    return cfg, samples, truths


class TestBenchmark:
    def test_oracle_features_near_perfect(self):
        # deep sequencing so that Poisson noise in the targets is negligible
        cfg = SynthConfig(tile_size=32, patch_size=8, G=32, G_xen=8, library_size=1e6)
        samples, truths = generate_slide(cfg, 300, "spot", "deep", full_panel=True)
        Y = np.stack([s.expression for s in samples])
        lam = np.stack([oracle_expression(t, cfg) for t in truths])
        feats = normalize_expression(lam, cfg.target_sum)
        rep = benchmark_expression(feats, Y, Protocol(n_pca=32, n_eval_hvg=10, alpha=1e-6))
        assert rep.mean_pearson >= 0.99

    def test_noise_features_null(self, rng):
        vals = []
        for seed in range(5):
            r = np.random.default_rng(seed)
            vals.append(benchmark_expression(r.normal(size=(500, 16)), r.normal(size=(500, 20)), Protocol(n_pca=16, n_eval_hvg=10, seed=seed)).mean_pearson)
        assert abs(np.mean(vals)) < 0.1
        assert all(abs(v) < 0.1 for v in vals)

    def test_report_contract(self, rng):
        F_, Y = rng.normal(size=(60, 6)), rng.normal(size=(60, 12))
        Y[:, 3] = 1.0
        p = Protocol(n_pca=4, n_eval_hvg=12)
        rep = benchmark_expression(F_, Y, p, variant="cls")
        assert rep.mean_pearson == pytest.approx(np.mean(rep.per_gene_pearson), abs=1e-15)
        assert len(rep.genes) == 12 and 3 in rep.degenerate_genes
        assert rep.config["n_pca"] == 4 and rep.variant == "cls"
        again = benchmark_expression(F_, Y, p, variant="cls")
        assert again.to_json() == rep.to_json()

    def test_n_pca_capped(self, rng):
        rep = benchmark_expression(rng.normal(size=(20, 5)), rng.normal(size=(20, 4)), Protocol(n_pca=256, n_eval_hvg=4))
        assert rep.n_pca == 5

    def test_alpha_grid_selects_from_grid(self, rng):
        rep = benchmark_expression(rng.normal(size=(80, 6)), rng.normal(size=(80, 5)), Protocol(n_pca=6, n_eval_hvg=5, alpha_grid=(0.1, 10.0)))
        assert rep.alpha in (0.1, 10.0)

    def test_degenerate_split(self, rng):
        with pytest.raises(ValueError, match="degenerate"):
            benchmark_expression(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


class TestProbe:
    def test_one_hot_separable(self, rng):
        y = rng.integers(0, 4, size=200)
        assert morphology_probe(np.eye(4)[y], y) == 1.0

    def test_permuted_labels_chance(self, synthetic):
        _, samples, _ = synthetic
        X = np.stack([s.tile.reshape(-1, 3).mean(0) for s in samples])
        y = np.random.default_rng(0).integers(0, 4, size=len(samples))
        acc = morphology_probe(X, y)
        assert abs(acc - 0.25) < 0.05

    def test_real_labels_above_chance(self, synthetic):
        _, samples, _ = synthetic
        X = np.stack([s.tile.reshape(-1, 3).mean(0) for s in samples])
        y = np.array([s.dominant for s in samples])
        assert morphology_probe(X, y) > 0.5

    def test_single_class(self, rng):
        with pytest.raises(ValueError, match="single class"):
            morphology_probe(rng.normal(size=(20, 2)), np.zeros(20, int))


class TestOrderingReport:
    def test_reference_table_rows(self):
        hest = dict(cls=0.413, st=0.428, sum=0.431, concat=0.440)
        probe = dict(cls=0.828, st=0.823, sum=0.837, concat=0.842)
        rep = ordering_report(
            {k: VariantScores(hest[k], probe[k]) for k in hest},
            frozen=VariantScores(0.415, 0.830),
            ablation_no_distill=VariantScores(0.0, 0.811),
            ablation_distill=VariantScores(0.0, 0.827),
        )
        for key in ("specialization", "sum_beats_cls", "concat_best", "cls_matches_frozen", "forgetting"):
            assert rep[key]["verdict"], key
        assert rep["all_true"]
        np.testing.assert_allclose(rep["concat_best"]["margin"], 0.009, atol=1e-12)

    def test_all_equal_is_false(self):
        rep = ordering_report({k: VariantScores(0.5, 0.5) for k in ("cls", "st", "sum", "concat")})
        assert not rep["specialization"]["verdict"]
        assert not rep["sum_beats_cls"]["verdict"]
        assert rep["concat_best"]["verdict"]  # ties satisfy a >= comparison
        assert not rep["all_true"]

    def test_verdicts_match_hand_comparison(self, rng):
        for _ in range(20):
            h, p = rng.uniform(size=4), rng.uniform(size=4)
            v = {k: VariantScores(h[i], p[i]) for i, k in enumerate(("cls", "st", "sum", "concat"))}
            rep = ordering_report(v, concat_tol=0.005)
            assert rep["specialization"]["verdict"] == (h[1] > h[0] and p[0] > p[1])
            assert rep["sum_beats_cls"]["verdict"] == (h[2] > h[0])
            assert rep["concat_best"]["verdict"] == (h[3] >= h[:3].max() - 0.005)

    def test_missing_variant(self):
        with pytest.raises(ValueError, match="missing"):
            ordering_report({"cls": VariantScores(0, 0)})


class TestExtraction:
    def test_records_and_round_trip(self, tmp_path, synthetic):
        from mint.dataset.manifest import GeneVocabulary, build_manifest

        cfg, samples, _ = synthetic
        sub = samples[:10]
        manifest = build_manifest(tmp_path / "ds", sub, GeneVocabulary.toy(cfg.G, cfg.G_xen), cfg.tile_size, "eval")
        base = VisionTransformer(BackboneConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, n_heads=2), generator=torch.Generator().manual_seed(0))
        model = extend_with_st_token(base)
        recs = extract_features(model, manifest, sub)
        assert len(recs) == 10
        assert [r.sample_id for r in recs] == sorted(r.sample_id for r in recs)
        again = extract_features(model, manifest, sub)
        for a, b in zip(recs, again):
            assert np.array_equal(a.z_cls, b.z_cls) and np.array_equal(a.z_st, b.z_st)
        save_features(tmp_path / "f.mnta", recs)
        back = load_features(tmp_path / "f.mnta")
        assert [r.sample_id for r in back] == [r.sample_id for r in recs]
        np.testing.assert_array_equal(back[3].z_st, recs[3].z_st)
