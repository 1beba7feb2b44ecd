import math

import numpy as np
import pytest

from megan import data, metrics
from megan.tensor import ShapeError


def test_psnr_identical_is_inf(rng):
    a = rng.uniform(0, 1, (3, 8, 8))
    assert metrics.psnr(a, a) == math.inf


def test_psnr_closed_forms():
    a = np.zeros((3, 4, 4))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-6)
    assert metrics.psnr(a, a + 1.0) == 0.0


def test_psnr_decreases_with_mse():
    a = np.zeros((3, 4, 4))
    vals = [metrics.psnr(a, a + e) for e in np.linspace(0.01, 1.0, 30)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_ssim_identity(rng):
    a = rng.uniform(0, 1, (3, 16, 20))
    assert abs(metrics.ssim(a, a) - 1.0) <= 1e-12


def test_ssim_symmetric_bit_exact(rng):
    a, b = rng.uniform(0, 1, (2, 3, 16, 16))
    assert metrics.ssim(a, b) == metrics.ssim(b, a)


def test_ssim_flip_invariant(rng):
    a, b = rng.uniform(0, 1, (2, 3, 16, 16))
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(a[..., ::-1], b[..., ::-1]), abs=1e-12)


def test_ssim_constant_images_direct_formula():
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1) * (c2 / c2)
    got = metrics.ssim(np.full((3, 12, 12), 0.2), np.full((3, 12, 12), 0.8))
    assert got == pytest.approx(expected, abs=1e-12)


def test_ssim_window_matches_direct_filter(rng):
    img = rng.uniform(0, 1, (13, 14))
    g = metrics.gaussian_window()
    w2 = np.outer(g, g)
    ref = np.array([[np.sum(img[i:i + 11, j:j + 11] * w2) for j in range(4)] for i in range(3)])
    np.testing.assert_allclose(metrics._filter_valid(img, g), ref, atol=1e-14)


def test_ssim_window_size_constraint():
    with pytest.raises(ShapeError):
        metrics.ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def test_ssim_in_range(rng):
    for _ in range(5):
        a, b = rng.uniform(0, 1, (2, 3, 12, 12))
        assert -1 <= metrics.ssim(a, b) <= 1


def test_report_format_self_comparison(tmp_path, rng):
    for t in (1, 2, 10):
        data.png_write(rng.uniform(0, 1, (3, 12, 12)), tmp_path / f"hr_{t}.png")
    text = metrics.evaluate_dirs(tmp_path, tmp_path).format()
    lines = text.splitlines()
    assert lines[0] == "frame_idx  psnr_db  ssim"
    assert lines[1:] == ["1  inf  1.0000", "2  inf  1.0000", "3  inf  1.0000", "mean  inf  1.0000"]


def test_report_decimal_places():
    rep = metrics.MetricReport([20.0, 30.123456], [0.5, 0.25])
    assert rep.format().splitlines()[-1] == "mean  25.0617  0.3750"
