"""Landscape evaluation tests: grid/standalone equivalence, log-scale
rendering arithmetic, black/white metrics and CSV round-trips."""

import numpy as np
import pytest

import mpo
from mpo.errors import DiffUndefinedError
from mpo.landscape import LOG_OFFSET, _normalized_channel

from conftest import random_batch


def make_plane(spec, seed, scale=0.1):
    from mpo.training import init_plane
    return init_plane(spec, seed, scale)


def grid_from(acc, loss=None, split="test"):
    acc = np.asarray(acc, dtype=np.float64)
    loss = np.ones_like(acc) if loss is None else np.asarray(loss, float)
    rows, cols = acc.shape
    a, b = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
    return mpo.GridResult(alpha=a, beta=b, loss=loss, accuracy=acc,
                          dataset_split=split)


class TestEvalGrid:
    def test_single_cell_at_origin_equals_direct_eval(self):
        ds = mpo.make_synthetic(20, image_size=6, seed=0, split="test")
        spec = mpo.mlp(ds.sample_shape, 2, hidden=(5,))
        plane = make_plane(spec, 0)
        extent = mpo.GridExtent(0, 0, 0, 0, 1, 1)
        grid = mpo.eval_grid(spec, plane, ds, extent, eval_batch_size=1000)
        batch = ds.batch(np.arange(len(ds)))
        direct, _ = mpo.loss_and_grad(spec, plane.w_origin, batch)
        assert grid.loss[0, 0] == pytest.approx(direct, rel=1e-12)
        assert grid.dataset_split == "test"

    def test_cells_match_standalone_models(self):
        ds = mpo.make_synthetic(16, image_size=6, seed=1)
        spec = mpo.mlp(ds.sample_shape, 2, hidden=(4,))
        plane = make_plane(spec, 1)
        extent = mpo.GridExtent(-1, 2, -1, 1, 4, 3)
        grid = mpo.eval_grid(spec, plane, ds, extent, eval_batch_size=1000)
        batch = ds.batch(np.arange(len(ds)))
        for r in range(grid.rows):
            for c in range(grid.cols):
                w = mpo.materialize(plane, (grid.alpha[r, c], grid.beta[r, c]))
                loss, _ = mpo.loss_and_grad(spec, w, batch)
                rel = abs(grid.loss[r, c] - loss) / max(abs(loss), 1e-300)
                assert rel <= 1e-12

    def test_untrained_plane_near_chance(self):
        ds = mpo.make_synthetic(500, image_size=6, seed=2)
        spec = mpo.mlp(ds.sample_shape, 2, hidden=(6,))
        plane = make_plane(spec, 3)
        grid = mpo.eval_grid(spec, plane, ds,
                             mpo.GridExtent(0, 2, 0, 2, 3, 3),
                             eval_batch_size=512, subsample=1000)
        assert np.isfinite(grid.loss).all()
        assert (np.abs(grid.accuracy - 0.5) <= 0.45).all()

    def test_subsample_deterministic(self):
        ds = mpo.make_synthetic(300, image_size=6, seed=3)
        spec = mpo.mlp(ds.sample_shape, 2, hidden=(4,))
        plane = make_plane(spec, 4)
        extent = mpo.GridExtent(0, 1, 0, 1, 2, 2)
        g1 = mpo.eval_grid(spec, plane, ds, extent, subsample=128)
        g2 = mpo.eval_grid(spec, plane, ds, extent, subsample=128)
        assert np.array_equal(g1.loss, g2.loss)
        assert np.array_equal(g1.accuracy, g2.accuracy)


class TestRender:
    def test_constant_grid_renders_midpoint_color(self, tmp_path):
        grid = grid_from(np.full((3, 4), 0.5), loss=np.full((3, 4), 2.0))
        out = mpo.render_heatmap(grid, "loss", tmp_path / "c.png")
        from PIL import Image
        px = np.asarray(Image.open(out))
        assert px.shape == (3, 4, 3)
        assert (px == px[0, 0]).all()
        from mpo.landscape import _colormap
        assert np.array_equal(px[0, 0], _colormap()[128])

    def test_monotone_in_loss(self):
        losses = np.array([[0.5, 2.0, 0.1, 7.0]])
        grid = grid_from(np.zeros((1, 4)), loss=losses)
        norm = _normalized_channel(grid, "loss")
        assert (np.argsort(norm.ravel()) == np.argsort(losses.ravel())).all()

    def test_log_decades_equally_spaced(self):
        grid = grid_from(np.zeros((1, 3)), loss=np.array([[0.01, 1.0, 100.0]]))
        norm = _normalized_channel(grid, "loss")
        assert np.allclose(norm.ravel(), [0.0, 0.5, 1.0], atol=1e-6)

    def test_zero_loss_is_safe(self):
        grid = grid_from(np.zeros((1, 2)), loss=np.array([[0.0, 1.0]]))
        norm = _normalized_channel(grid, "loss")
        assert np.isfinite(norm).all()
        assert norm[0, 0] == 0.0 and norm[0, 1] == 1.0
        assert LOG_OFFSET > 0

    def test_accuracy_channel_linear(self):
        grid = grid_from(np.array([[0.0, 0.25, 1.0]]))
        assert np.allclose(_normalized_channel(grid, "accuracy").ravel(),
                           [0.0, 0.25, 1.0])

    def test_upscale_and_pgm_fallback(self, tmp_path):
        grid = grid_from(np.array([[0.0, 1.0]]))
        png = mpo.render_heatmap(grid, "accuracy", tmp_path / "u.png", upscale=3)
        from PIL import Image
        assert np.asarray(Image.open(png)).shape == (3, 6, 3)
        pgm = mpo.render_heatmap(grid, "accuracy", tmp_path / "u.pgm", upscale=2)
        from mpo.patterns import read_pgm
        assert read_pgm(pgm).shape == (2, 4)

    def test_render_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = grid_from(rng.random((5, 5)), loss=rng.random((5, 5)))
        a = mpo.render_heatmap(grid, "loss", tmp_path / "a.png")
        b = mpo.render_heatmap(grid, "loss", tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()


class TestBlackWhiteMetrics:
    def test_constant_grid_zero_diff(self):
        grid = grid_from(np.full((2, 2), 0.7))
        mask = mpo.Mask(np.array([[1, 0], [0, 1]]))
        m = mpo.black_white_metrics(grid, mask)
        assert m.diff == pytest.approx(0.0, abs=1e-15)

    def test_all_black_mask_diff_undefined(self):
        grid = grid_from(np.full((2, 2), 0.9))
        with pytest.raises(DiffUndefinedError) as exc:
            mpo.black_white_metrics(grid, mpo.Mask(np.ones((2, 2))))
        assert exc.value.mean_acc_black == pytest.approx(0.9)
        assert np.isnan(exc.value.mean_acc_white)

    def test_handcrafted_two_by_two(self):
        grid = grid_from(np.array([[0.9, 0.8], [0.2, 0.1]]))
        mask = mpo.Mask(np.array([[1, 0], [0, 1]]))  # diagonal black
        m = mpo.black_white_metrics(grid, mask)
        assert m.mean_acc_black == pytest.approx((0.9 + 0.1) / 2)
        assert m.mean_acc_white == pytest.approx((0.8 + 0.2) / 2)
        assert m.diff == pytest.approx(0.5 - 0.5)

    def test_dimension_mismatch_rejected(self):
        grid = grid_from(np.zeros((2, 3)))
        with pytest.raises(mpo.InputError):
            mpo.black_white_metrics(grid, mpo.Mask(np.ones((2, 2))))


class TestGridCsv:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = grid_from(rng.random((3, 4)), loss=rng.random((3, 4)))
        path = tmp_path / "g.csv"
        grid.to_csv(path)
        again = mpo.GridResult.from_csv(path, dataset_split="test")
        assert np.array_equal(again.loss, grid.loss)
        assert np.array_equal(again.accuracy, grid.accuracy)
        assert np.array_equal(again.alpha, grid.alpha)

    def test_correlation_of_identical_grids_is_one(self):
        rng = np.random.default_rng(2)
        grid = grid_from(rng.random((4, 4)))
        assert mpo.grid_correlation(grid, grid) == pytest.approx(1.0)

    def test_correlation_requires_matching_shape(self):
        with pytest.raises(mpo.InputError):
            mpo.grid_correlation(grid_from(np.zeros((2, 2)) + np.arange(2)),
                                 grid_from(np.zeros((3, 3)) + np.arange(3)))
