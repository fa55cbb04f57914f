import numpy as np
import pytest

from m3ae.errors import ConfigError
from m3ae.synthetic import SyntheticSpec, make_dataset, make_template, regenerate


def test_template_properties():
    t = make_template((16, 24, 16))
    assert t.dtype == np.float32
    assert 0.0 <= t.min() and t.max() <= 1.0
    assert t[8, 12, 8] > 0 and t[0, 0, 0] == 0
    assert np.array_equal(t, make_template((16, 24, 16)))


def test_template_intensity_plateaus():
    t = make_template((32, 48, 32))
    values = set(np.round(t[t > 0].astype(np.float64), 6).tolist())
    assert 0.8 in values
    assert any(0.3 <= v <= 0.6 for v in values)
    assert t.max() <= 0.8 + 1e-6


def test_identity_when_no_perturbation():
    tpl, vols, _ = make_dataset(SyntheticSpec(n_samples=3, magnitude=0.0, blobs=0))
    for v in vols:
        assert np.array_equal(v, np.clip(tpl, 0, 1))


def test_samples_in_unit_range():
    _, vols, _ = make_dataset(SyntheticSpec(n_samples=8, magnitude=1.0, blob_amplitude=0.5))
    assert vols.min() >= 0 and vols.max() <= 1


def test_difference_grows_with_magnitude():
    diffs = []
    for mag in (0.25, 0.5, 1.0):
        tpl, vols, _ = make_dataset(SyntheticSpec(n_samples=32, magnitude=mag, blobs=0))
        diffs.append(float(np.abs(vols - tpl).mean()))
    assert diffs[0] < diffs[1] < diffs[2]


def test_dataset_deterministic_and_regenerable():
    spec = SyntheticSpec(n_samples=5, seed=3)
    _, a, manifest = make_dataset(spec)
    _, b, _ = make_dataset(spec)
    assert np.array_equal(a, b)
    _, c = regenerate(manifest)
    assert np.array_equal(a, c)
    assert len({e["seed"] for e in manifest["samples"]}) == 5


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(magnitude=-1.0).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(template="brain").validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(resolution=(2, 8, 8)).validate()
