"""Pattern handling tests: downsampling against a brute-force box filter,
interior pruning against exhaustive neighborhood scans, random masks and
file round-trips."""

import numpy as np
import pytest

import mpo
from mpo.patterns import (area_average_resample, read_pgm, write_pgm)


def brute_force_box_filter(img, out_h, out_w):
    """Independent area-average oracle: integrate each source pixel's
    overlap with each target cell by explicit interval arithmetic."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y0, y1 = i * in_h / out_h, (i + 1) * in_h / out_h
        for j in range(out_w):
            x0, x1 = j * in_w / out_w, (j + 1) * in_w / out_w
            acc = 0.0
            for r in range(in_h):
                oy = max(0.0, min(y1, r + 1) - max(y0, r))
                if oy == 0.0:
                    continue
                for c in range(in_w):
                    ox = max(0.0, min(x1, c + 1) - max(x0, c))
                    acc += oy * ox * img[r, c]
            out[i, j] = acc / ((y1 - y0) * (x1 - x0))
    return out


class TestDownsample:
    def test_identity_at_target_size(self):
        rng = np.random.default_rng(0)
        img = (rng.random((9, 7)) > 0.5).astype(float)
        mask = mpo.downsample_threshold(img, 7, 9)
        assert np.array_equal(mask.pixels, 1 - img.astype(np.uint8))

    def test_tie_goes_black(self):
        # 2x2 block with darkness {0, 0, 1, 1}: mean exactly 0.5
        img = np.array([[1.0, 1.0], [0.0, 0.0]])  # intensities
        mask = mpo.downsample_threshold(img, 1, 1)
        assert mask.pixels[0, 0] == 1

    def test_disc_matches_brute_force_oracle(self):
        yy, xx = np.mgrid[0:100, 0:100]
        disc_dark = ((yy - 50.0) ** 2 + (xx - 50.0) ** 2 <= 30.0**2)
        img = 1.0 - disc_dark.astype(float)  # dark disc on white
        mask = mpo.downsample_threshold(img, 50, 50)
        oracle = brute_force_box_filter(disc_dark.astype(float), 50, 50)
        assert np.array_equal(mask.pixels, (oracle >= 0.5).astype(np.uint8))

    @pytest.mark.parametrize("shape,target", [((10, 10), (3, 7)),
                                              ((13, 9), (5, 5)),
                                              ((6, 6), (6, 4))])
    def test_fractional_resample_matches_oracle(self, shape, target):
        rng = np.random.default_rng(42)
        img = rng.random(shape)
        got = area_average_resample(img, *target)
        want = brute_force_box_filter(img, *target)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_all_black_and_all_white_preserved(self):
        for value, expect in [(0.0, 1), (1.0, 0)]:
            img = np.full((30, 20), value)
            mask = mpo.downsample_threshold(img, 7, 11)
            assert (mask.pixels == expect).all()

    def test_empty_image_rejected(self):
        with pytest.raises(mpo.InputError):
            mpo.downsample_threshold(np.zeros((0, 4)), 2, 2)


class TestCellSets:
    def test_all_black_3x3_prunes_center(self):
        cells = mpo.derive_cell_sets(mpo.Mask(np.ones((3, 3))))
        assert len(cells.p_minus) == 9 and not cells.p_plus
        assert cells.trainable == cells.p_minus - {(1, 1)}

    def test_checkerboard_keeps_everything(self):
        mask = mpo.checkerboard_mask(6, 5)
        cells = mpo.derive_cell_sets(mask)
        assert cells.trainable == cells.p_minus | cells.p_plus
        assert len(cells.trainable) == 30

    def test_single_white_in_black_field_by_enumeration(self):
        px = np.ones((5, 5), dtype=np.uint8)
        px[2, 2] = 0
        cells = mpo.derive_cell_sets(mpo.Mask(px))

        # independent oracle: scan every pixel's 8-neighborhood explicitly
        expected_trainable = set()
        for r in range(5):
            for c in range(5):
                neighbors = [(r + dr, c + dc)
                             for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                             if (dr, dc) != (0, 0)]
                full = all(0 <= rr < 5 and 0 <= cc < 5 for rr, cc in neighbors)
                if not full or any(px[rr, cc] != px[r, c]
                                   for rr, cc in neighbors):
                    expected_trainable.add((c, r))
        assert cells.trainable == expected_trainable
        assert (2, 2) in cells.trainable          # the white pixel
        assert (1, 1) in cells.trainable          # its diagonal neighbor
        assert len(cells.p_minus) == 24 and len(cells.p_plus) == 1

    def test_pruning_never_removes_boundary_adjacent_cells(self):
        rng = np.random.default_rng(8)
        for seed in range(10):
            mask = mpo.gen_random_mask(9, 9, rng.random(), seed)
            cells = mpo.derive_cell_sets(mask)
            px = mask.pixels
            pruned = (cells.p_minus | cells.p_plus) - cells.trainable
            for a, b in pruned:
                same = [px[b + dr, a + dc] == px[b, a]
                        for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                        if (dr, dc) != (0, 0)]
                assert all(same)

    def test_idempotent_and_pure(self):
        mask = mpo.gen_random_mask(8, 6, 0.4, 3)
        before = mask.pixels.copy()
        a = mpo.derive_cell_sets(mask)
        b = mpo.derive_cell_sets(mask)
        assert np.array_equal(mask.pixels, before)
        assert a.trainable == b.trainable and a.p_minus == b.p_minus

    def test_csv_export(self, tmp_path):
        mask = mpo.Mask(np.array([[1, 0], [0, 1]]))
        cells = mpo.derive_cell_sets(mask)
        out = tmp_path / "cells.csv"
        cells.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "alpha,beta,class,trainable"
        assert len(lines) == 5
        assert lines[1] == "0,0,black,1"


class TestRandomMask:
    def test_extremes(self):
        assert (mpo.gen_random_mask(4, 5, 0.0, 1).pixels == 0).all()
        assert (mpo.gen_random_mask(4, 5, 1.0, 1).pixels == 1).all()

    def test_fill_prob_out_of_range(self):
        with pytest.raises(mpo.InputError):
            mpo.gen_random_mask(4, 4, 1.5, 0)

    def test_half_fill_within_three_sigma(self):
        mask = mpo.gen_random_mask(30, 30, 0.5, 123)
        frac = mask.pixels.mean()
        assert abs(frac - 0.5) <= 3 * 0.5 / 30  # binomial bound on 900 pixels

    def test_bit_reproducible(self):
        a = mpo.gen_random_mask(12, 8, 0.3, 77)
        b = mpo.gen_random_mask(12, 8, 0.3, 77)
        assert np.array_equal(a.pixels, b.pixels)


class TestCheckerboard:
    def test_block_and_border(self):
        mask = mpo.checkerboard_mask(4, 4, block=2, border=1)
        assert mask.pixels[0].tolist() == [1, 1, 1, 1]
        assert mask.pixels[1].tolist() == [1, 1, 0, 1]

    def test_plain_alternation(self):
        mask = mpo.checkerboard_mask(3, 2)
        assert mask.pixels.tolist() == [[1, 0, 1], [0, 1, 0]]


class TestMaskIO:
    def test_pgm_binary_roundtrip(self, tmp_path):
        mask = mpo.gen_random_mask(7, 5, 0.5, 9)
        path = tmp_path / "m.pgm"
        mpo.save_mask(path, mask)
        again = mpo.load_mask(path)
        assert np.array_equal(again.pixels, mask.pixels)

    def test_pgm_ascii_parse(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_text("P2\n# comment\n3 2\n255\n0 255 0\n255 0 255\n")
        gray = read_pgm(path)
        assert gray.shape == (2, 3)
        assert np.allclose(gray[0], [0.0, 1.0, 0.0])

    def test_pgm_truncated_payload(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(mpo.ParseError):
            read_pgm(path)

    def test_png_roundtrip(self, tmp_path):
        from PIL import Image
        mask = mpo.gen_random_mask(6, 6, 0.4, 4)
        path = tmp_path / "m.png"
        Image.fromarray((1 - mask.pixels) * np.uint8(255), mode="L").save(path)
        again = mpo.load_mask(path)
        assert np.array_equal(again.pixels, mask.pixels)

    def test_write_pgm_bytes_deterministic(self, tmp_path):
        gray = np.linspace(0, 1, 12).reshape(3, 4)
        p1, p2 = tmp_path / "1.pgm", tmp_path / "2.pgm"
        write_pgm(p1, gray)
        write_pgm(p2, gray)
        assert p1.read_bytes() == p2.read_bytes()
