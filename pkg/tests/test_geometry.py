"""Point transforms under crop/resize/flip and transcript binning."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mint.dataset import CropGeometry, apply_geometry_to_points, bin_transcripts_to_patches, transform_transcripts
from mint.dataset.geometry import map_points
from mint.trainer.augment import render_crops


def brute_force_bins(t, tile, ps, g_xen):
    p = tile // ps
    raw = np.zeros((p, p, g_xen))
    for x, y, g in t:
        for r in range(p):
            for c in range(p):
                if c * ps <= x < (c + 1) * ps and r * ps <= y < (r + 1) * ps:
                    raw[r, c, int(g)] += 1
    return raw


class TestPointGeometry:
    def test_identity(self, rng):
        pts = rng.uniform(0, 63.9, size=(50, 2))
        np.testing.assert_allclose(apply_geometry_to_points(pts, CropGeometry.identity(64)), pts, atol=1e-12)

    def test_crop_right_half(self):
        g = CropGeometry(32, 0, 32, 64, 32, 64)
        out = apply_geometry_to_points([[40.0, 5.0], [10.0, 5.0]], g)
        np.testing.assert_allclose(out, [[8.0, 5.0]])

    def test_flip_pixel_centres(self):
        g = CropGeometry(0, 0, 64, 64, 64, 64, flip=True)
        np.testing.assert_allclose(apply_geometry_to_points([[10.0, 3.0]], g), [[53.0, 3.0]])

    def test_degenerate(self):
        with pytest.raises(ValueError):
            map_points(np.zeros((1, 2)), CropGeometry(0, 0, 0, 10, 8, 8))

    def test_transcript_gene_column_carried(self):
        t = np.array([[1.0, 2.0, 3.0], [70.0, 1.0, 0.0]])
        out = transform_transcripts(t, CropGeometry.identity(64))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_points_follow_image_resampling(self, rng):
        # a single bright pixel moved by grid_sample lands where map_points sends its centre
        img = torch.zeros(1, 1, 32, 32, dtype=torch.float64)
        img[0, 0, 9, 21] = 1.0
        for geom in [CropGeometry(4, 2, 24, 24, 24, 24, True), CropGeometry(8, 8, 16, 16, 32, 32, False)]:
            out = render_crops(img, [0], [geom])[0, 0].numpy()
            ((mx, my),), keep = map_points(np.array([[21.0, 9.0]]), geom)
            assert keep[0]
            yy, xx = np.mgrid[0 : out.shape[0], 0 : out.shape[1]]
            cx, cy = (out * xx).sum() / out.sum(), (out * yy).sum() / out.sum()
            np.testing.assert_allclose([cx, cy], [mx, my], atol=1e-9)


class TestBinning:
    def test_single_transcript(self):
        grid = bin_transcripts_to_patches([[5.0, 5.0, 0]], 64, 16, 4)
        assert grid.positive_mask.sum() == 1 and grid.positive_mask[0, 0]
        np.testing.assert_allclose(grid.counts[0, 0], [np.log(2), 0, 0, 0])

    def test_half_open_boundary(self):
        grid = bin_transcripts_to_patches([[16.0, 0.0, 1]], 64, 16, 2)
        assert grid.positive_mask[0, 1] and not grid.positive_mask[0, 0]

    def test_right_edge_dropped(self):
        grid = bin_transcripts_to_patches([[64.0, 3.0, 0], [3.0, 64.0, 0]], 64, 16, 1)
        assert not grid.positive_mask.any()

    def test_matches_brute_force(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            t = np.c_[r.uniform(-2, 66, 200), r.uniform(-2, 66, 200), r.integers(0, 5, 200)]
            t[:10, 0] = r.integers(0, 5, 10) * 16.0  # exact boundaries
            grid = bin_transcripts_to_patches(t, 64, 16, 5)
            raw = brute_force_bins(t, 64, 16, 5)
            np.testing.assert_allclose(grid.counts, np.log1p(raw), rtol=1e-8, atol=0)
            np.testing.assert_array_equal(grid.positive_mask, raw.sum(-1) >= 1)

    @given(st.lists(st.tuples(st.floats(0, 63.99), st.floats(0, 63.99), st.integers(0, 3)), max_size=60))
    @settings(max_examples=50, deadline=None)
    def test_mass_conservation(self, rows):
        t = np.array(rows, dtype=float).reshape(-1, 3)
        grid = bin_transcripts_to_patches(t, 64, 16, 4)
        assert np.expm1(grid.counts).sum().round() == len(rows)
        assert np.all(grid.counts[~grid.positive_mask] == 0)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            bin_transcripts_to_patches(np.zeros((0, 3)), 60, 16, 2)

    def test_bad_gene(self):
        with pytest.raises(ValueError):
            bin_transcripts_to_patches([[1.0, 1.0, 9]], 64, 16, 4)
