"""Differentiable spatial transforms on voxel grids.

Conventions (fixed, and written into checkpoints):

* volumes are ``[N, C, D, H, W]`` with W the fastest axis;
* vector fields are ``[N, 3, D, H, W]`` holding displacements in voxels of
  their own grid, channel 0 along W (x), 1 along H (y), 2 along D (z);
* sampling is trilinear with clamp-to-edge boundaries.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteError, ShapeError

CONVENTION = {
    "interpolation": "trilinear",
    "boundary": "clamp-to-edge",
    "units": "voxels",
    "channel_order": "dx(W),dy(H),dz(D)",
}

# channel -> spatial axis of a [N, C, D, H, W] array
_CHANNEL_AXIS = {0: 4, 1: 3, 2: 2}


def _axis_setup(coord: np.ndarray, n: int):
    """Clamp sample coordinates and split them into cell index and fraction."""
    c = np.clip(coord, 0, n - 1)
    live = (coord >= 0) & (coord <= n - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), max(n - 2, 0))
    t = (c - i0).astype(coord.dtype)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, t, live


def _check_pair(volume: Tensor, field: Tensor, op: str) -> None:
    if volume.ndim != 5 or field.ndim != 5:
        raise ShapeError(f"{op}: expected 5-d volume and field, got {volume.shape} and {field.shape}")
    if field.shape[1] != 3:
        raise ShapeError(f"{op}: field must have 3 channels, got {field.shape[1]}")
    if volume.shape[0] != field.shape[0]:
        raise ShapeError(f"{op}: batch sizes differ ({volume.shape[0]} vs {field.shape[0]})")
    if volume.shape[2:] != field.shape[2:]:
        raise ShapeError(f"{op}: field grid {field.shape[2:]} != volume grid {volume.shape[2:]}")


def warp(volume: Tensor, field: Tensor) -> Tensor:
    """Resample ``volume`` at p + field(p) for every voxel p.

    Differentiable with respect to both arguments. A zero field returns the
    input bitwise; outputs stay within the input's value range.
    """
    _check_pair(volume, field, "warp")
    N, C, D, H, W = volume.shape
    S = D * H * W
    dtype = np.result_type(volume.dtype, field.dtype)
    fd = field.data.astype(dtype, copy=False)
    if not np.all(np.isfinite(fd)):
        raise NonFiniteError("warp: displacement field contains non-finite values")
    grid = np.indices((D, H, W), dtype=dtype)  # (z, y, x)

    iz0, iz1, tz, lz = _axis_setup(grid[0] + fd[:, 2], D)
    iy0, iy1, ty, ly = _axis_setup(grid[1] + fd[:, 1], H)
    ix0, ix1, tx, lx = _axis_setup(grid[2] + fd[:, 0], W)

    zs = ((iz0, 1 - tz), (iz1, tz))
    ys = ((iy0, 1 - ty), (iy1, ty))
    xs = ((ix0, 1 - tx), (ix1, tx))

    vol = volume.data.astype(dtype, copy=False).reshape(N, C, S)
    n_idx = np.arange(N)[:, None, None]
    c_idx = np.arange(C)[None, :, None]

    corners = []  # (bits, flat index [N,S], weight [N,S], wz, wy, wx)
    for bz, (zi, wz) in enumerate(zs):
        for by, (yi, wy) in enumerate(ys):
            for bx, (xi, wx) in enumerate(xs):
                flat = ((zi * H + yi) * W + xi).reshape(N, S)
                corners.append(((bz, by, bx), flat, wz.reshape(N, S), wy.reshape(N, S), wx.reshape(N, S)))

    vals = [vol[n_idx, c_idx, flat[:, None, :]] for _, flat, *_ in corners]
    out = np.zeros((N, C, S), dtype=dtype)
    for (_, _, wz, wy, wx), v in zip(corners, vals):
        out += (wz * wy * wx)[:, None, :] * v
    out = out.reshape(N, C, D, H, W)
    lives = (lx.reshape(N, S), ly.reshape(N, S), lz.reshape(N, S))

    def backward(g):
        g = g.reshape(N, C, S)
        gvol = None
        if volume.requires_grad:
            base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * S
            idx = np.concatenate([(base + flat[:, None, :]).ravel() for _, flat, *_ in corners])
            wts = np.concatenate([(g * (wz * wy * wx)[:, None, :]).ravel() for _, _, wz, wy, wx in corners])
            gvol = np.bincount(idx, weights=wts, minlength=N * C * S).astype(volume.dtype).reshape(volume.shape)
        gfield = None
        if field.requires_grad:
            gx = np.zeros((N, S), dtype=dtype)
            gy = np.zeros((N, S), dtype=dtype)
            gz = np.zeros((N, S), dtype=dtype)
            for ((bz, by, bx), _, wz, wy, wx), v in zip(corners, vals):
                gv = (g * v).sum(axis=1)
                gx += (1 if bx else -1) * wz * wy * gv
                gy += (1 if by else -1) * wz * wx * gv
                gz += (1 if bz else -1) * wy * wx * gv
            gfield = np.stack([gx * lives[0], gy * lives[1], gz * lives[2]], axis=1)
            gfield = gfield.reshape(field.shape).astype(field.dtype, copy=False)
        return gvol, gfield

    return Tensor._make(out, (volume, field), "warp", backward)


def compose_fields(outer: Tensor, inner: Tensor) -> Tensor:
    """Displacement of "apply ``inner``, then ``outer``": inner(p) + outer(p + inner(p))."""
    _check_pair(outer, inner, "compose_fields")
    return ad.add(inner, warp(outer, inner))


def integrate_velocity(velocity: Tensor, steps: int = 6) -> Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise ValueError(f"integrate_velocity: steps must be >= 1, got {steps}")
    phi = ad.scale(velocity, 1.0 / 2 ** steps)
    for _ in range(steps):
        phi = compose_fields(phi, phi)
    return phi


def upsample_field(field: Tensor, factor: int = 2) -> Tensor:
    """Trilinearly upsample a field x2 and rescale its voxel-unit values."""
    if factor != 2:
        raise ValueError("upsample_field only supports factor 2")
    return ad.scale(ad.resize_trilinear(field, 2), 2.0)


# -- finite differences --------------------------------------------------


def _diff(x: np.ndarray, axis: int) -> np.ndarray:
    xm = np.moveaxis(x, axis, 0)
    d = np.empty_like(xm)
    d[1:-1] = (xm[2:] - xm[:-2]) * 0.5
    d[0] = xm[1] - xm[0]
    d[-1] = xm[-1] - xm[-2]
    return np.moveaxis(d, 0, axis)


def _diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros_like(gm)
    half = gm[1:-1] * 0.5
    out[2:] += half
    out[:-2] -= half
    out[1] += gm[0]
    out[0] -= gm[0]
    out[-1] += gm[-1]
    out[-2] -= gm[-1]
    return np.moveaxis(out, 0, axis)


def finite_diff(x: Tensor, axis: int) -> Tensor:
    """Derivative along ``axis``: central inside, one-sided at the two ends."""
    axis = axis % x.ndim
    if x.shape[axis] < 3:
        raise ShapeError(f"finite_diff: axis {axis} has size {x.shape[axis]} (< 3)")
    return Tensor._make(_diff(x.data, axis), (x,), "finite_diff",
                        lambda g: (np.ascontiguousarray(_diff_adjoint(g, axis)),))


def _check_field(field: Tensor, op: str) -> None:
    if field.ndim != 5 or field.shape[1] != 3:
        raise ShapeError(f"{op}: expected field [N,3,D,H,W], got {field.shape}")
    for name, n in zip("DHW", field.shape[2:]):
        if n < 3:
            raise ShapeError(f"{op}: axis {name} has size {n} (< 3)")


def spatial_gradient(field: Tensor) -> Tensor:
    """Jacobian entries ``[N, 9, D, H, W]``; channel 3*c + a is d(field_c)/d(x_a), a over (x, y, z)."""
    _check_field(field, "spatial_gradient")
    parts = []
    for c in range(3):
        comp = ad.narrow(field, 1, c, 1)
        for a in range(3):
            parts.append(finite_diff(comp, _CHANNEL_AXIS[a]))
    return ad.concat(parts, axis=1)


def divergence(field: Tensor) -> Tensor:
    """d(dx)/dx + d(dy)/dy + d(dz)/dz as ``[N, D, H, W]``."""
    _check_field(field, "divergence")
    N, _, D, H, W = field.shape
    total = None
    for c in range(3):
        term = finite_diff(ad.narrow(field, 1, c, 1), _CHANNEL_AXIS[c])
        total = term if total is None else ad.add(total, term)
    return ad.reshape(total, (N, D, H, W))
