import numpy as np
import pytest
from scipy.linalg import sqrtm

from m3ae.errors import MetricError, ShapeError
from m3ae.metrics import (FEATURE_DIM, SliceProtocol, extract_slice_features, frechet_distance, frechet_from_stats,
                          mse, psnr, slice_descriptor, ssim3d, zigzag)


def closed_form_frechet(mu1, s1, mu2, s2):
    covmean = sqrtm(s1 @ s2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


def test_ssim_identity(rng):
    x = rng.uniform(0, 1, size=(16, 24, 16))
    assert ssim3d(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_drops_with_noise(rng):
    x = rng.uniform(0, 1, size=(12, 12, 12))
    a = ssim3d(x, np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1))
    b = ssim3d(x, np.clip(x + rng.normal(0, 0.3, x.shape), 0, 1))
    assert 1 > a > b


def test_ssim_hand_computed_single_window():
    # a 7^3 volume holds exactly one window, so SSIM reduces to one closed-form value
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 1, (7, 7, 7)), rng.uniform(0, 1, (7, 7, 7))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    cxy = np.sum((x - mx) * (y - my)) / (x.size - 1)
    want = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert ssim3d(x, y) == pytest.approx(want, rel=1e-9)


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ShapeError):
        ssim3d(np.zeros((5, 8, 8)), np.zeros((5, 8, 8)))
    with pytest.raises(ShapeError):
        ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)))


def test_psnr_closed_form():
    x = np.zeros((4, 4, 4))
    y = np.full((4, 4, 4), 0.1)  # MSE 0.01
    assert mse(x, y) == pytest.approx(0.01)
    assert abs(psnr(x, y) - 20.0) < 1e-6
    assert psnr(x, x) == float("inf")


def test_frechet_matches_closed_form_on_gaussians():
    rng = np.random.default_rng(0)
    d, n = 64, 10_000
    a = rng.normal(size=(d, d)) / np.sqrt(d)
    s1 = a @ a.T + 0.5 * np.eye(d)
    b = rng.normal(size=(d, d)) / np.sqrt(d)
    s2 = b @ b.T + 0.3 * np.eye(d)
    mu1, mu2 = np.zeros(d), rng.normal(0, 0.3, d)
    f1 = rng.multivariate_normal(mu1, s1, size=n)
    f2 = rng.multivariate_normal(mu2, s2, size=n)
    exact = closed_form_frechet(mu1, s1, mu2, s2)
    assert abs(frechet_distance(f1, f2) - exact) / exact < 0.05


def test_frechet_from_stats_matches_scipy(rng):
    d = 8
    a, b = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    s1, s2 = a @ a.T + np.eye(d), b @ b.T + np.eye(d)
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    assert frechet_from_stats(mu1, s1, mu2, s2) == pytest.approx(closed_form_frechet(mu1, s1, mu2, s2), rel=1e-8)


def test_frechet_self_distance_is_zero(rng):
    f = rng.normal(size=(50, FEATURE_DIM))
    assert frechet_distance(f, f) < 1e-6


def test_frechet_rejects_bad_input(rng):
    with pytest.raises(MetricError):
        frechet_distance(rng.normal(size=(1, 4)), rng.normal(size=(5, 4)))
    bad = rng.normal(size=(5, 4))
    bad[0, 0] = np.nan
    with pytest.raises(MetricError):
        frechet_distance(bad, rng.normal(size=(5, 4)))
    with pytest.raises(MetricError, match="semidefinite"):
        frechet_from_stats(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def test_zigzag_order():
    assert zigzag(3) == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2)]
    order = zigzag(32)
    assert len(order) == len(set(order)) == 32 * 32


def test_slice_descriptor(rng):
    sl = rng.uniform(0, 1, size=(16, 24))
    f = slice_descriptor(sl)
    assert f.shape == (FEATURE_DIM,)
    assert f[:16].sum() == pytest.approx(1.0)
    # DC term is excluded, so a constant slice has no DCT energy
    assert np.allclose(slice_descriptor(np.full((16, 24), 0.4))[16:], 0.0, atol=1e-12)


def test_slice_positions_scale_per_axis():
    p = SliceProtocol()
    assert p.positions_for((80, 96, 80), "axial") == [30, 40, 50, 60]
    assert p.positions_for((80, 96, 80), "coronal") == [30, 40, 50, 60]
    assert p.positions_for((16, 24, 16), "sagittal") == [6, 8, 10, 12]
    assert p.positions_for((16, 24, 16), "coronal") == [8, 10, 13, 15]
    with pytest.raises(ShapeError):
        SliceProtocol(positions=(90,)).positions_for((80, 96, 80), "axial")


def test_extract_features_keys(rng):
    vols = rng.uniform(0, 1, size=(4, 16, 24, 16))
    feats = extract_slice_features(vols)
    assert len(feats) == 12
    fs = feats[("axial", 6)]
    assert fs.features.shape == (4, FEATURE_DIM) and fs.tag["extractor"]
    with pytest.raises(ShapeError):
        extract_slice_features(vols[:1])
