"""Reconstruction metrics and a slice-based Frechet distance.

The Frechet distance uses a fixed hand-built slice descriptor (intensity
histogram + low-frequency DCT coefficients) rather than a pretrained network,
so values are only comparable with other runs of this same extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn
from scipy.ndimage import uniform_filter

from .errors import MetricError, ShapeError
from .resample import linear_resize

EXTRACTOR_ID = "hist16+zigzag-dct48@32x32/v1"
HIST_BINS = 16
N_DCT = 48
SLICE_SIZE = 32
FEATURE_DIM = HIST_BINS + N_DCT
SHRINKAGE = 1e-6
NEG_EIG_TOL = 1e-8

# axis of a [D, H, W] volume normal to each slice orientation
AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
REFERENCE_DIMS = (80, 96, 80)
REFERENCE_POSITIONS = (30, 40, 50, 60)


def _same_shape(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` when the inputs are identical."""
    m = mse(x, y)
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / m))


def ssim3d(x, y, win: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained ``win``^3 uniform windows."""
    x, y = _same_shape(x, y)
    if x.ndim != 3:
        raise ShapeError(f"ssim3d expects 3-d volumes, got shape {x.shape}")
    if min(x.shape) < win:
        raise ShapeError(f"ssim3d: volume {x.shape} smaller than window {win}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = win ** 3
    cov_norm = n / (n - 1)
    r = win // 2
    valid = tuple(slice(r, s - r) for s in x.shape)

    def box(a):
        return uniform_filter(a, size=win, mode="nearest")[valid]

    ux, uy = box(x), box(y)
    uxx, uyy, uxy = box(x * x), box(y * y), box(x * y)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


# -- slice features ------------------------------------------------------


def zigzag(n: int) -> list[tuple[int, int]]:
    """JPEG-style zig-zag scan of an n x n grid, starting at (0, 0)."""
    order = []
    for s in range(2 * n - 1):
        rows = range(max(0, s - n + 1), min(s, n - 1) + 1)
        rows = rows if s % 2 else reversed(rows)
        order.extend((i, s - i) for i in rows)
    return order


_ZIGZAG = zigzag(SLICE_SIZE)[1:N_DCT + 1]
_ZZ_ROWS = np.array([i for i, _ in _ZIGZAG])
_ZZ_COLS = np.array([j for _, j in _ZIGZAG])


def slice_descriptor(sl: np.ndarray) -> np.ndarray:
    """64-d descriptor: 16-bin intensity histogram (fractions) + 48 zig-zag DCT-II coefficients."""
    sl = np.asarray(sl, dtype=np.float64)
    hist, _ = np.histogram(np.clip(sl, 0.0, 1.0), bins=HIST_BINS, range=(0.0, 1.0))
    small = linear_resize(sl, (SLICE_SIZE, SLICE_SIZE))
    coef = dctn(small, type=2, norm="ortho")
    return np.concatenate([hist / sl.size, coef[_ZZ_ROWS, _ZZ_COLS]])


@dataclass
class SliceProtocol:
    axes: tuple[str, ...] = ("axial", "coronal", "sagittal")
    positions: tuple[int, ...] = REFERENCE_POSITIONS

    def positions_for(self, shape, axis: str) -> list[int]:
        """Slice indices along ``axis``, rescaled from the 80x96x80 reference grid."""
        a = AXES[axis]
        dim = shape[a]
        out = [int(np.floor(p * dim / REFERENCE_DIMS[a] + 0.5)) for p in self.positions]
        if any(not 0 <= p < dim for p in out):
            raise ShapeError(f"slice positions {out} out of bounds for {axis} axis of size {dim}")
        return out

    def to_dict(self, shape) -> dict:
        return {ax: self.positions_for(shape, ax) for ax in self.axes}


@dataclass
class FeatureSet:
    features: np.ndarray
    tag: dict = field(default_factory=dict)


def extract_slice_features(volumes: np.ndarray, protocol: SliceProtocol | None = None) -> dict:
    """FeatureSet per (axis, position) for volumes ``[n, D, H, W]``."""
    protocol = protocol or SliceProtocol()
    volumes = np.asarray(volumes)
    if volumes.ndim != 4 or len(volumes) < 2:
        raise ShapeError(f"need at least 2 volumes shaped [n, D, H, W], got {volumes.shape}")
    out = {}
    for axis in protocol.axes:
        a = AXES[axis]
        for pos in protocol.positions_for(volumes.shape[1:], axis):
            feats = np.stack([slice_descriptor(np.take(v, pos, axis=a)) for v in volumes])
            out[(axis, pos)] = FeatureSet(feats, {"extractor": EXTRACTOR_ID, "axis": axis, "position": pos})
    return out


def _sqrt_psd(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    if w.min() < -NEG_EIG_TOL:
        raise MetricError(f"covariance not positive semidefinite (eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu1, s1, mu2, s2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) for Gaussian fits."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    if not all(np.all(np.isfinite(a)) for a in (mu1, mu2, s1, s2)):
        raise MetricError("non-finite statistics")
    r1 = _sqrt_psd(s1)
    if np.linalg.eigvalsh(s2).min() < -NEG_EIG_TOL:
        raise MetricError("second covariance not positive semidefinite")
    m = r1 @ s2 @ r1
    lam = np.linalg.eigvalsh((m + m.T) / 2)
    if lam.min() < -NEG_EIG_TOL:
        raise MetricError(f"covariance product not positive semidefinite (eigenvalue {lam.min():.3e})")
    tr_sqrt = float(np.sqrt(np.clip(lam, 0, None)).sum())
    d = mu1 - mu2
    fd = float(d @ d + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)
    return max(fd, 0.0)


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise MetricError(f"need an [n >= 2, d] feature matrix, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise MetricError("non-finite features")
    return f.mean(axis=0), np.cov(f, rowvar=False) + SHRINKAGE * np.eye(f.shape[1])


def frechet_distance(f1, f2) -> float:
    a = f1.features if isinstance(f1, FeatureSet) else f1
    b = f2.features if isinstance(f2, FeatureSet) else f2
    mu1, s1 = gaussian_fit(a)
    mu2, s2 = gaussian_fit(b)
    return frechet_from_stats(mu1, s1, mu2, s2)


def per_axis_frechet(real: np.ndarray, fake: np.ndarray, protocol: SliceProtocol | None = None) -> dict[str, float]:
    """Frechet distance per slice, averaged over the positions of each axis."""
    protocol = protocol or SliceProtocol()
    fr = extract_slice_features(real, protocol)
    ff = extract_slice_features(fake, protocol)
    out = {}
    for axis in protocol.axes:
        keys = [k for k in fr if k[0] == axis]
        out[axis] = float(np.mean([frechet_distance(fr[k], ff[k]) for k in keys]))
    return out


# -- model evaluation ----------------------------------------------------

REPORT_FIELDS = ("fd_axial", "fd_coronal", "fd_sagittal", "mse", "ssim", "psnr")


def evaluate_model(model, volumes: np.ndarray, n_samples: int, seed: int = 0,
                   protocol: SliceProtocol | None = None, batch_size: int = 16) -> dict:
    """Table-style report: per-axis Frechet distances of prior samples vs ``volumes``
    and mean reconstruction metrics over ``volumes``.

    Generated and reconstructed volumes are clipped to [0, 1] before scoring.
    """
    protocol = protocol or SliceProtocol()
    volumes = np.asarray(volumes, dtype=np.float32)
    rng = np.random.default_rng(seed)
    samples = []
    for start in range(0, n_samples, batch_size):
        k = min(batch_size, n_samples - start)
        samples.append(model.sample(k, rng).final.data[:, 0])
    samples = np.clip(np.concatenate(samples), 0.0, 1.0)

    recon = []
    for start in range(0, len(volumes), batch_size):
        recon.append(model.reconstruct(volumes[start:start + batch_size, None]).final.data[:, 0])
    recon = np.clip(np.concatenate(recon), 0.0, 1.0)

    fd = per_axis_frechet(volumes, samples, protocol)
    metrics = {
        "fd_axial": fd["axial"],
        "fd_coronal": fd["coronal"],
        "fd_sagittal": fd["sagittal"],
        "mse": float(np.mean([mse(a, b) for a, b in zip(volumes, recon)])),
        "ssim": float(np.mean([ssim3d(a, b) for a, b in zip(volumes, recon)])),
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(volumes, recon)])),
    }
    n_min = min(len(volumes), n_samples)
    meta = {
        "extractor": EXTRACTOR_ID,
        "feature_dim": FEATURE_DIM,
        "slice_positions": protocol.to_dict(volumes.shape[1:]),
        "n_real": int(len(volumes)),
        "n_generated": int(n_samples),
        "covariance_shrinkage": SHRINKAGE,
        "shrinkage_engaged": bool(n_min < FEATURE_DIM + 1),
        "mode": "direct_output" if model.config.direct_output else "metamorphic",
        "sample_seed": int(seed),
    }
    return {"metrics": metrics, "meta": meta}
