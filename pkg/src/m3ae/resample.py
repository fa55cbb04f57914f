"""Plain-numpy linear resampling to arbitrary grid sizes (no autodiff)."""

from __future__ import annotations

import numpy as np


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row j holds the align-corners-false linear weights for output sample j."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = pos - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def linear_resize(arr: np.ndarray, shape) -> np.ndarray:
    """Separable (bi/tri)linear resize of the trailing ``len(shape)`` axes."""
    out = np.asarray(arr, dtype=np.float64)
    k = len(shape)
    for j, n_out in enumerate(shape):
        axis = out.ndim - k + j
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        out = np.moveaxis(np.tensordot(interp_matrix(n_in, n_out), np.moveaxis(out, axis, 0), axes=1), 0, axis)
    return out
