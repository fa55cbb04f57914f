"""Synthetic phantom data: a nested-ellipsoid template and randomly deformed copies.

Samples come from the same transform family the model learns (an additive
intensity change followed by a diffeomorphic warp), so a perfect model could
explain them up to interpolation error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .resample import linear_resize
from .warp import integrate_velocity, warp

# (center, semi-axes) as fractions of the half-extent per axis (z, y, x), and intensity
_STRUCTURES = (
    ((0.0, 0.0, 0.0), (0.85, 0.85, 0.85), 0.8),
    ((0.0, 0.0, 0.0), (0.68, 0.70, 0.68), 0.6),
    ((0.05, 0.0, -0.22), (0.22, 0.35, 0.12), 0.3),
    ((0.05, 0.0, 0.22), (0.22, 0.35, 0.12), 0.3),
    ((-0.30, 0.10, 0.0), (0.15, 0.18, 0.30), 0.45),
)


@dataclass(frozen=True)
class SyntheticSpec:
    resolution: tuple[int, int, int] = (16, 24, 16)
    n_samples: int = 256
    seed: int = 0
    magnitude: float = 0.5
    blobs: int = 4
    blob_amplitude: float = 0.1
    blob_sigma: float = 2.0
    coarse_factor: int = 4
    squaring_steps: int = 6
    template: str = "nested-ellipsoids"

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))

    def validate(self) -> "SyntheticSpec":
        if len(self.resolution) != 3 or min(self.resolution) < 3:
            raise ConfigError(f"resolution must be three ints >= 3, got {self.resolution}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.magnitude < 0 or self.blob_amplitude < 0 or self.blobs < 0:
            raise ConfigError("magnitude, blobs and blob_amplitude must be >= 0")
        if self.template != "nested-ellipsoids":
            raise ConfigError(f"unknown template kind {self.template!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def _smooth_mask(resolution, center, semi) -> np.ndarray:
    # approximate signed distance in voxels, then a 1-voxel cosine ramp
    coords = [(np.arange(n) + 0.5 - n / 2.0) for n in resolution]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    half = [n / 2.0 for n in resolution]
    c = [ci * h for ci, h in zip(center, half)]
    a = [si * h for si, h in zip(semi, half)]
    r = np.sqrt(((zz - c[0]) / a[0]) ** 2 + ((yy - c[1]) / a[1]) ** 2 + ((xx - c[2]) / a[2]) ** 2)
    s = (r - 1.0) * min(a)
    return np.where(s <= -0.5, 1.0, np.where(s >= 0.5, 0.0, 0.5 * (1.0 + np.cos(np.pi * (s + 0.5)))))


def make_template(resolution) -> np.ndarray:
    """Deterministic phantom in [0, 1]: shell 0.8, inner structures 0.3-0.6, background 0."""
    resolution = tuple(int(r) for r in resolution)
    vol = np.zeros(resolution)
    for center, semi, value in _STRUCTURES:
        m = _smooth_mask(resolution, center, semi)
        vol = vol * (1.0 - m) + value * m
    return vol.astype(np.float32)


def smooth_noise(rng: np.random.Generator, resolution, channels: int, coarse_factor: int) -> np.ndarray:
    """Coarse Gaussian noise trilinearly upsampled to ``resolution``; shape [channels, D, H, W]."""
    coarse = tuple(max(2, -(-n // coarse_factor)) for n in resolution)
    return linear_resize(rng.standard_normal((channels,) + coarse), resolution)


def _blobs(rng: np.random.Generator, resolution, count: int, amplitude: float, sigma: float) -> np.ndarray:
    out = np.zeros(resolution)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in resolution], indexing="ij")
    for _ in range(count):
        center = [rng.uniform(0.2 * n, 0.8 * n) for n in resolution]
        amp = rng.uniform(-amplitude, amplitude)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        out += amp * np.exp(-r2 / (2 * sigma ** 2))
    return out


def make_sample(template: np.ndarray, spec: SyntheticSpec, sample_seed: int) -> np.ndarray:
    rng = np.random.default_rng(sample_seed)
    res = spec.resolution
    v = smooth_noise(rng, res, 3, spec.coarse_factor)
    peak = np.abs(v).max()
    v = v * (spec.magnitude / peak) if peak > 0 else v
    A = _blobs(rng, res, spec.blobs, spec.blob_amplitude, spec.blob_sigma)
    with ad.no_grad():
        phi = integrate_velocity(Tensor(v[None], dtype=np.float32), spec.squaring_steps)
        moved = warp(Tensor((template + A)[None, None], dtype=np.float32), phi)
    return np.clip(moved.data[0, 0], 0.0, 1.0).astype(np.float32)


def sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def make_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, dict]:
    """Template, samples ``[n, D, H, W]`` and a manifest that regenerates them."""
    spec.validate()
    template = make_template(spec.resolution)
    seeds = sample_seeds(spec.seed, spec.n_samples)
    volumes = np.stack([make_sample(template, spec, s) for s in seeds])
    manifest = {
        "generator": "m3ae.synthetic",
        "spec": spec.to_dict(),
        "template": "template.m3v",
        "samples": [{"file": f"sample_{i:05d}.m3v", "seed": s} for i, s in enumerate(seeds)],
    }
    return template, volumes, manifest


def regenerate(manifest: dict) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild template and samples from a manifest produced by ``make_dataset``."""
    spec = SyntheticSpec(**manifest["spec"]).validate()
    template = make_template(spec.resolution)
    volumes = np.stack([make_sample(template, spec, int(e["seed"])) for e in manifest["samples"]])
    return template, volumes
