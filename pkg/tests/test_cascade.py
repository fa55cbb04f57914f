import numpy as np
import pytest

from m3ae.autodiff import Tensor
from m3ae.cascade import LevelTransforms, level_shape, metamorphic_apply, resample_only, run_cascade
from m3ae.errors import ShapeError
from m3ae.synthetic import make_template


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def zero_transforms(base, L, n=1):
    out = []
    for i in range(1, L + 1):
        shape = level_shape(base, i)
        A = T(np.zeros((n, 1) + shape))
        phi = T(np.zeros((n, 3) + shape)) if i < L else None
        out.append(LevelTransforms(i, A, phi, phi))
    return out


@pytest.fixture
def template():
    return T(make_template((16, 24, 16))[None, None])


def test_level_shapes_double():
    assert [level_shape((2, 3, 2), i) for i in (1, 2, 3)] == [(4, 6, 4), (8, 12, 8), (16, 24, 16)]


def test_zero_transforms_reproduce_resampled_template(template):
    trace = run_cascade(template, zero_transforms((2, 3, 2), 3))
    assert [x.shape[2:] for x in trace.levels] == [(4, 6, 4), (8, 12, 8), (16, 24, 16)]
    np.testing.assert_array_equal(trace.final.data, resample_only(template, 3).data)


def test_last_level_is_additive(template, rng):
    trs = zero_transforms((2, 3, 2), 3)
    A3 = rng.normal(size=(1, 1, 16, 24, 16))
    trs[-1] = LevelTransforms(3, T(A3))
    trace = run_cascade(template, trs)
    np.testing.assert_allclose(trace.final.data, resample_only(template, 3).data + A3)


def test_last_level_rejects_deformation(template):
    trs = zero_transforms((2, 3, 2), 3)
    trs[-1].phi = T(np.zeros((1, 3, 16, 24, 16)))
    with pytest.raises(ShapeError, match="additive only"):
        run_cascade(template, trs)


def test_wrong_resolution_names_the_level(template):
    trs = zero_transforms((2, 3, 2), 3)
    trs[1].A = T(np.zeros((1, 1, 8, 12, 9)))
    with pytest.raises(ShapeError, match="level 2"):
        run_cascade(template, trs)


def test_metamorphic_apply_intensity_then_warp(rng):
    T0 = rng.normal(size=(1, 1, 4, 5, 6))
    A = rng.normal(size=(1, 1, 4, 5, 6))
    phi = np.zeros((1, 3, 4, 5, 6))
    phi[:, 0] = 1.0
    out = metamorphic_apply(T(T0), T(A), T(phi)).data
    np.testing.assert_allclose(out[..., :-1], (T0 + A)[..., 1:])
    with pytest.raises(ShapeError):
        metamorphic_apply(T(T0), T(A[..., :-1]), T(phi))


def test_coarse_levels_see_deformation(template, rng):
    trs = zero_transforms((2, 3, 2), 3)
    phi = np.zeros((1, 3, 4, 6, 4))
    phi[:, 1] = 0.7
    trs[0] = LevelTransforms(1, trs[0].A, T(phi), T(phi))
    moved = run_cascade(template, trs)
    base = resample_only(template, 3)
    assert np.abs(moved.final.data - base.data).mean() > 1e-3
