"""Coarse-to-fine metamorphic transform cascade applied to a fixed template."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .warp import warp


@dataclass
class LevelTransforms:
    """Transform parameters for one level (1-based).

    ``phi`` is the displacement fed to the warp; ``velocity`` is the raw
    decoder output it was integrated from (identical when integration is off).
    Both are absent at the last level, which is additive only.
    """

    level: int
    A: Tensor
    phi: Tensor | None = None
    velocity: Tensor | None = None


@dataclass
class CascadeTrace:
    """Per-level outputs x_hat^(i); the last one is the final volume."""

    levels: list[Tensor]
    transforms: list[LevelTransforms] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.levels[-1]


def level_shape(base_grid, level: int) -> tuple[int, int, int]:
    return tuple(int(b) * 2 ** level for b in base_grid)


def metamorphic_apply(T: Tensor, A: Tensor, phi: Tensor) -> Tensor:
    """(T + A) resampled through the displacement ``phi``."""
    if T.shape[2:] != A.shape[2:] or A.shape[2:] != phi.shape[2:]:
        raise ShapeError(
            f"metamorphic_apply: resolutions differ (T {T.shape[2:]}, A {A.shape[2:]}, phi {phi.shape[2:]})"
        )
    return warp(ad.add(T, A), phi)


def _base_grid(template: Tensor, levels: int) -> tuple[int, int, int]:
    f = 2 ** levels
    dims = template.shape[2:]
    if any(d % f for d in dims):
        raise ShapeError(f"template grid {dims} is not divisible by 2**{levels}")
    return tuple(d // f for d in dims)


def coarse_template(template: Tensor, levels: int) -> Tensor:
    """The template average-pooled to the level-1 grid."""
    _base_grid(template, levels)
    return ad.avg_pool3d(template, 2 ** (levels - 1))


def resample_only(template: Tensor, levels: int) -> Tensor:
    """Zero-transform baseline: pool to level 1, then upsample back level by level."""
    t = coarse_template(template, levels)
    for _ in range(levels - 1):
        t = ad.resize_trilinear(t, 2)
    return t


def run_cascade(template: Tensor, transforms: list[LevelTransforms]) -> CascadeTrace:
    """Apply ``transforms`` (levels 1..L, coarse to fine) to ``template``.

    Each level warps (T + A) at its own grid and upsamples the result x2 to
    form the next level's input; the last level only adds its A.
    """
    if template.ndim != 5:
        raise ShapeError(f"run_cascade: template must be [N,C,D,H,W], got {template.shape}")
    L = len(transforms)
    if L < 1:
        raise ShapeError("run_cascade: no transform levels")
    base = _base_grid(template, L)
    T = coarse_template(template, L)
    outputs = []
    for i, tr in enumerate(transforms, start=1):
        if tr.level != i:
            raise ShapeError(f"run_cascade: transform at position {i} is labelled level {tr.level}")
        want = level_shape(base, i)
        if tuple(tr.A.shape[2:]) != want:
            raise ShapeError(f"run_cascade: level {i} A grid {tr.A.shape[2:]} != expected {want}")
        if i < L:
            if tr.phi is None:
                raise ShapeError(f"run_cascade: level {i} is missing its deformation field")
            if tuple(tr.phi.shape[2:]) != want:
                raise ShapeError(f"run_cascade: level {i} phi grid {tr.phi.shape[2:]} != expected {want}")
            x_i = metamorphic_apply(T, tr.A, tr.phi)
            T = ad.resize_trilinear(x_i, 2)
        else:
            if tr.phi is not None:
                raise ShapeError(f"run_cascade: last level {i} must be additive only")
            x_i = ad.add(T, tr.A)
        outputs.append(x_i)
    return CascadeTrace(outputs, list(transforms))
